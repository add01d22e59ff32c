//! Score a handful of answers with the text and scene-graph metrics.

use ormllm::metrics::{self, EvalCorpus, MetricReport};
use ormllm::scenegen::{EntityClass, Predicate, Triple};

fn main() -> ormllm::Result<()> {
    let mut corpus = EvalCorpus::default();
    corpus.push("the patient is on top of the operating table", vec!["The patient is on top of the operating table.".into()])?;
    corpus.push("left of", vec!["left of".into(), "in front of".into()])?;
    corpus.push("two", vec!["three".into()])?;
    let mut report = MetricReport::default();
    report.from_qa(&corpus)?;
    for (name, value) in report.rows() {
        println!("{name:<18} {value:.3}");
    }

    let mut pair = EvalCorpus::default();
    pair.push("police killed the gunman", vec!["police kill the gunman".into()])?;
    println!("rouge-l on a one-word substitution: {:.2}", metrics::rouge_l(&pair)?);

    let predicted = "surgeon|next_to|instrument_tray; patient|on_top_of|operating_table; bogus";
    let gold = [
        Triple { subject: EntityClass::Patient, predicate: Predicate::OnTopOf, object: EntityClass::OperatingTable },
        Triple { subject: EntityClass::Nurse, predicate: Predicate::LeftOf, object: EntityClass::Monitor },
    ];
    let parsed = metrics::parse_triples(predicted);
    println!("parsed {} triples, {} malformed", parsed.triples.len(), parsed.malformed);
    let (p, r, f1) = metrics::sgg_prf(&parsed, &gold);
    println!("sgg P {p:.3} R {r:.3} F1 {f1:.3}");
    Ok(())
}
