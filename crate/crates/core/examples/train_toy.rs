//! Trains the toy preset on a synthetic task and reports test exact-match.
//!
//! cargo run --release --example train_toy -- [task] [steps] [lr] [open|masked|fc] [single]

use cotok::experiment::SynthExperiment;
use cotok::ingest::SynthTask;
use cotok::pipeline::Decoding;
use cotok::training::configure_threads;

fn main() -> cotok::Result<()> {
    configure_threads();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let task: SynthTask = args.first().map_or("temporal_order", String::as_str).parse()?;
    let mut cfg = cotok::preset("toy")?;
    if let Some(s) = args.get(1) {
        cfg.train.steps = s.parse().expect("steps");
    }
    if let Some(lr) = args.get(2) {
        cfg.train.lr = lr.parse().expect("lr");
    }
    let mut exp = SynthExperiment::new(task, cfg);
    if let Some(d) = args.get(3) {
        exp.decoding = d.parse::<Decoding>()?;
    }
    exp.single_frame = args.iter().any(|a| a == "single");
    let every = (exp.steps / 20).max(1) as u64;
    let mut window = Vec::new();
    let out = exp.run(|step, loss| {
        window.push(loss);
        if step % every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {step:>5}  loss {mean:.4}");
            window.clear();
        }
    })?;
    println!(
        "{} ({} frames per stream): test exact-match {:.3}, final loss {:.4}, {:.0}s",
        task.keyword(),
        if exp.single_frame { "1" } else { "all" },
        out.accuracy,
        out.final_loss,
        out.seconds
    );
    Ok(())
}
