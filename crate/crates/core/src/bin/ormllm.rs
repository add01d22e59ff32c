fn main() {
    std::process::exit(ormllm::cli::main());
}
