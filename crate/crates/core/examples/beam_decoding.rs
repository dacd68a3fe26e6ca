//! Greedy, beam and masked decoding over a briefly trained toy model.

use std::collections::BTreeSet;

use cotok::decoder::DecodeMode;
use cotok::ingest::{detokenize, synth_range, SynthTask};
use cotok::pipeline::samples;
use cotok::training::{build_vocab, prepare_samples, train, TrainState};
use cotok::Model;

fn main() -> cotok::Result<()> {
    let cfg = cotok::preset("toy")?.validate()?;
    let examples = synth_range(SynthTask::FrameColor, 2, 0, 200)?;
    let vocab = build_vocab(&examples);
    let data = prepare_samples(&examples, &vocab, None, &cfg, std::path::Path::new("."))?;
    let (model, store) = Model::init(cfg.clone(), 2);
    let mut state = TrainState::new(store, 2);
    train(&model, &mut state, &samples(&data[..150]), &cfg.train, cfg.train.lr, 60, |_, _| Ok(()))?;

    let only_red_blue: BTreeSet<usize> = ["red", "blue"].iter().filter_map(|w| vocab.id(w)).collect();
    println!("{:<10} {:<18} {:<18} {:<18}", "truth", "greedy", "beam 4", "masked red|blue");
    for ex in &data[150..160] {
        let fused = model.encode(&state.params, &ex.sample.clips, &ex.sample.question)?;
        let greedy = model.greedy(&state.params, &fused, &DecodeMode::Open)?;
        let beam = model.beam(&state.params, &fused, 4, &DecodeMode::Open)?;
        let masked = model.beam(&state.params, &fused, 4, &DecodeMode::Masked(only_red_blue.clone()))?;
        let show = |tokens: &[usize], score: f64| format!("{} ({score:.2})", detokenize(tokens, &vocab));
        let cotok::Target::Text(t) = &ex.sample.target else { unreachable!() };
        println!(
            "{:<10} {:<18} {:<18} {:<18}",
            detokenize(t.content(), &vocab),
            show(&greedy.tokens, greedy.score),
            show(&beam[0].tokens, beam[0].score),
            show(&masked[0].tokens, masked[0].score)
        );
    }
    Ok(())
}
