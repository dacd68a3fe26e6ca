//! Video and text ingestion, the QA file format, and synthetic tasks.

mod qa;
mod synth;
mod text;
mod video;

use std::path::Path;

pub use qa::{parse_qa, read_qa, write_qa, QaExample, VideoSource};
pub use synth::{
    synth_dataset, synth_example, synth_range, Scene, SynthTask, COLORS, COUNT_WORDS,
    SOURCE_FRAMES, SOURCE_SIZE,
};
pub use text::{detokenize, normalize_words, tokenize_text, TextSequence, Vocab, EOS, PAD, UNK};
pub use video::{
    clip_for_stream, preprocess, read_frame_dir, read_tensor_video, read_video, sample_frames,
    write_frame_dir, write_tensor_video, Frame, RawVideo, VideoClip,
};

use crate::config::ModelConfig;
use crate::error::Result;

/// Decodes a video source; relative paths resolve against `base`.
pub fn load_video(source: &VideoSource, base: &Path) -> Result<RawVideo> {
    match source {
        VideoSource::Synthetic { task, seed, index } => {
            Ok(Scene::generate(*task, *seed, *index).render())
        }
        VideoSource::Path(p) => read_video(&base.join(p)),
    }
}

/// One clip per configured stream.
pub fn clips_for_config(video: &RawVideo, config: &ModelConfig) -> Result<Vec<VideoClip>> {
    config
        .streams
        .iter()
        .map(|s| clip_for_stream(video, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sampled_length_matches_target(f in 1usize..300, t in 1usize..64) {
            let idx = sample_frames(f, t).unwrap();
            prop_assert_eq!(idx.len(), t);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|i| *i < f));
        }

        #[test]
        fn preprocess_stays_in_range(
            h in 1usize..8, w in 1usize..8, th in 1usize..10, tw in 1usize..10, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
            let f = Frame::from_bytes(h, w, &bytes).unwrap();
            let t = preprocess(&f, th, tw).unwrap();
            prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn tokenize_detokenize_round_trip(words in prop::collection::vec(0usize..6, 1..7)) {
            let pool = ["red", "what", "color", "after", "shape", "blue"];
            let text: Vec<&str> = words.iter().map(|i| pool[*i]).collect();
            let text = text.join(" ");
            let vocab = Vocab::build(pool);
            let seq = tokenize_text(&text, &vocab, 8);
            prop_assert_eq!(detokenize(&seq.ids, &vocab), text.clone());
            let again = tokenize_text(&detokenize(&seq.ids, &vocab), &vocab, 8);
            prop_assert_eq!(again, seq);
        }
    }

    #[test]
    fn synthetic_clip_matches_stream_geometry() {
        let cfg = crate::config::preset("toy").unwrap();
        let ex = synth_example(SynthTask::FrameColor, 0, 0);
        let video = load_video(&ex.video, Path::new(".")).unwrap();
        let clips = clips_for_config(&video, &cfg).unwrap();
        for (c, s) in clips.iter().zip(&cfg.streams) {
            assert_eq!(c.geometry(), (s.frames, s.height, s.width));
            assert_eq!(c.source_frame_count, SOURCE_FRAMES);
        }
    }
}
