//! Exact-match and IVQA scoring, including a predictions file round trip.

use cotok::ingest::{synth_dataset, SynthTask};
use cotok::metrics::{exact_match, ivqa_accuracy, read_predictions, score, write_predictions, EvalMode, MatchRule, Prediction};

fn main() -> cotok::Result<()> {
    let answers: Vec<String> = ["a", "a", "a", "a", "b"].iter().map(|s| s.to_string()).collect();
    for pred in ["a", "b", "c"] {
        println!("ivqa({pred} | a,a,a,a,b) = {:.1}", ivqa_accuracy(pred, &answers)?);
    }
    println!("exact(\"  Red \", \"red\") = {}", exact_match("  Red ", "red"));

    let gt = synth_dataset(SynthTask::FrameColor, 4, 9)?;
    let preds: Vec<Prediction> = gt
        .iter()
        .enumerate()
        .take(3)
        .map(|(i, ex)| Prediction {
            id: ex.id.clone(),
            answer: if i % 2 == 0 { ex.answers[0].to_uppercase() } else { "nothing".into() },
            score: -0.5,
        })
        .collect();
    let path = std::env::temp_dir().join("cotok_example_predictions.tsv");
    write_predictions(&preds, &path)?;
    let back = read_predictions(&path)?;
    for rule in [MatchRule::Normalized, MatchRule::Raw] {
        println!("\n{rule:?} matching:\n{}", score(&back, &gt, EvalMode::Exact, rule)?);
    }
    Ok(())
}
