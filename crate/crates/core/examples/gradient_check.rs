//! Finite-difference check of every training objective on tiny models.

use ormllm::pipeline;

fn main() -> ormllm::Result<()> {
    let mut ok = true;
    for (loss, report) in pipeline::gradcheck_suite(0)? {
        let worst = report.worst().map_or("-", |w| w.name.as_str());
        println!("{loss:<17} {:>3} tensors  max rel err {:.2e}  ({worst})", report.tensors.len(), report.max_rel_error());
        ok &= report.passed();
    }
    println!("{}", if ok { "all gradients agree" } else { "MISMATCH" });
    Ok(())
}
