//! Encodes one synthetic example with each fusion mode and shows how the
//! attention maps move between co-tokenization rounds.

use cotok::config::FusionMode;
use cotok::ingest::{clips_for_config, load_video, synth_example, tokenize_text, SynthTask};
use cotok::training::build_vocab;
use cotok::Model;

fn main() -> cotok::Result<()> {
    let ex = synth_example(SynthTask::TemporalOrder, 3, 0);
    let vocab = build_vocab(std::slice::from_ref(&ex));
    println!("question: {}", ex.question);
    for mode in [FusionMode::IterativeCoTok, FusionMode::StaticTokenize, FusionMode::DenseConcat] {
        let mut cfg = cotok::preset("desk_default")?;
        cfg.fusion_mode = mode;
        let cfg = cfg.validate()?;
        let (model, store) = Model::init(cfg.clone(), 1);
        let video = load_video(&ex.video, std::path::Path::new("."))?;
        let clips = clips_for_config(&video, &cfg)?;
        let question = tokenize_text(&ex.question, &vocab, cfg.text_max_len);
        let fused = match model.encode(&store, &clips, &question) {
            Ok(f) => f,
            Err(e) => {
                println!("\n{}: {e}", mode.keyword());
                continue;
            }
        };
        println!(
            "\n{}: fused sequence {:?}, {} attention exports",
            mode.keyword(),
            fused.values.shape(),
            fused.attention.len()
        );
        let features = cfg.features().len();
        for round in 1..cfg.fusion_layers {
            if fused.attention.len() < (round + 1) * features {
                break;
            }
            for f in 0..features {
                let a = &fused.attention[(round - 1) * features + f];
                let b = &fused.attention[round * features + f];
                let diff = a
                    .values
                    .data()
                    .iter()
                    .zip(b.values.data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.values.len() as f64;
                println!(
                    "  stream {} scale {}: round {} -> {} mean |change| {diff:.3e}",
                    a.stream_index,
                    a.scale_index,
                    a.iteration,
                    b.iteration
                );
            }
        }
    }
    Ok(())
}
