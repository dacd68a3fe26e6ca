//! Deterministic synthetic VideoQA tasks.
//!
//! Each example is a pure function of `(task, seed, index)`, so the QA file
//! only needs the descriptor to regenerate its video.
//!
//! * `frame_color`: one static coloured square; answerable from any frame.
//! * `temporal_order`: a square of one colour, then another. The first colour
//!   holds through the clip midpoint, so neither the first nor the middle
//!   frame reveals the answer.
//! * `repeat_count`: a square blinks 1 to 4 times.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::qa::{QaExample, VideoSource};
use super::video::{Frame, RawVideo};
use crate::error::{Error, Result};

pub const SOURCE_FRAMES: usize = 16;
pub const SOURCE_SIZE: usize = 32;

const BACKGROUND: [f64; 3] = [24.0, 24.0, 28.0];

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [220.0, 40.0, 40.0]),
    ("green", [40.0, 200.0, 60.0]),
    ("blue", [50.0, 80.0, 235.0]),
    ("yellow", [235.0, 220.0, 50.0]),
    ("purple", [150.0, 60.0, 200.0]),
    ("cyan", [40.0, 215.0, 215.0]),
];

pub const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthTask {
    FrameColor,
    TemporalOrder,
    RepeatCount,
}

impl SynthTask {
    pub const ALL: [SynthTask; 3] = [
        SynthTask::FrameColor,
        SynthTask::TemporalOrder,
        SynthTask::RepeatCount,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            SynthTask::FrameColor => "frame_color",
            SynthTask::TemporalOrder => "temporal_order",
            SynthTask::RepeatCount => "repeat_count",
        }
    }

    fn salt(self) -> u64 {
        match self {
            SynthTask::FrameColor => 0x5eed_0001,
            SynthTask::TemporalOrder => 0x5eed_0002,
            SynthTask::RepeatCount => 0x5eed_0003,
        }
    }

    /// Every answer string the task can produce.
    pub fn answer_set(self) -> Vec<&'static str> {
        match self {
            SynthTask::RepeatCount => COUNT_WORDS.to_vec(),
            _ => COLORS.iter().map(|(n, _)| *n).collect(),
        }
    }
}

impl FromStr for SynthTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SynthTask::ALL
            .into_iter()
            .find(|t| t.keyword() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown task `{s}` (expected frame_color, temporal_order or repeat_count)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Square {
    top: usize,
    left: usize,
    size: usize,
}

/// The latent content of one synthetic example.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub task: SynthTask,
    /// Colour index per visible segment, in temporal order.
    pub colors: Vec<usize>,
    /// Frames on which a square is drawn, with the segment it belongs to.
    pub visible: Vec<Option<usize>>,
    squares: Vec<Square>,
    noise_seed: u64,
}

impl Scene {
    pub fn generate(task: SynthTask, seed: u64, index: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ task.salt());
        rng.set_stream(index);
        let square = |rng: &mut ChaCha8Rng| {
            let size = rng.gen_range(10..=16);
            Square {
                top: rng.gen_range(0..=SOURCE_SIZE - size),
                left: rng.gen_range(0..=SOURCE_SIZE - size),
                size,
            }
        };
        let (colors, visible, squares) = match task {
            SynthTask::FrameColor => {
                let c = rng.gen_range(0..COLORS.len());
                (vec![c], vec![Some(0); SOURCE_FRAMES], vec![square(&mut rng)])
            }
            SynthTask::TemporalOrder => {
                let pair = sample(&mut rng, COLORS.len(), 2);
                let (mut a, mut b) = (pair.index(0), pair.index(1));
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if rng.gen_bool(0.5) {
                    std::mem::swap(&mut a, &mut b);
                }
                let switch = (5 * SOURCE_FRAMES).div_ceil(8);
                let visible = (0..SOURCE_FRAMES)
                    .map(|f| Some(usize::from(f >= switch)))
                    .collect();
                let sq = vec![square(&mut rng), square(&mut rng)];
                (vec![a, b], visible, sq)
            }
            SynthTask::RepeatCount => {
                let m = rng.gen_range(1..=4);
                let c = rng.gen_range(0..COLORS.len());
                let mut slots: Vec<usize> = sample(&mut rng, 4, m).into_vec();
                slots.sort_unstable();
                let slot_len = SOURCE_FRAMES / 4;
                let mut visible = vec![None; SOURCE_FRAMES];
                for (seg, s) in slots.iter().enumerate() {
                    for f in 0..slot_len - 1 {
                        visible[s * slot_len + f] = Some(seg);
                    }
                }
                let sq = (0..m).map(|_| square(&mut rng)).collect();
                (vec![c; m], visible, sq)
            }
        };
        Scene {
            task,
            colors,
            visible,
            squares,
            noise_seed: rng.gen(),
        }
    }

    pub fn question(&self) -> String {
        match self.task {
            SynthTask::FrameColor => "what color is the shape".into(),
            SynthTask::TemporalOrder => {
                format!("what color appears after {}", COLORS[self.colors[0]].0)
            }
            SynthTask::RepeatCount => "how many times does the shape appear".into(),
        }
    }

    pub fn answer(&self) -> String {
        match self.task {
            SynthTask::FrameColor => COLORS[self.colors[0]].0.into(),
            SynthTask::TemporalOrder => COLORS[self.colors[1]].0.into(),
            SynthTask::RepeatCount => COUNT_WORDS[self.colors.len() - 1].into(),
        }
    }

    /// Renders `SOURCE_FRAMES` frames of `SOURCE_SIZE²` pixels with mild noise.
    pub fn render(&self) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let frames = self
            .visible
            .iter()
            .map(|seg| {
                let mut f = Frame::filled(SOURCE_SIZE, SOURCE_SIZE, BACKGROUND);
                if let Some(seg) = seg {
                    let sq = self.squares[*seg];
                    let rgb = COLORS[self.colors[*seg]].1;
                    for y in sq.top..sq.top + sq.size {
                        for x in sq.left..sq.left + sq.size {
                            let o = (y * SOURCE_SIZE + x) * 3;
                            f.data[o..o + 3].copy_from_slice(&rgb);
                        }
                    }
                }
                for v in f.data.iter_mut() {
                    *v = (*v + rng.gen_range(-8.0..=8.0)).clamp(0.0, 255.0).round();
                }
                f
            })
            .collect();
        RawVideo { frames }
    }
}

pub fn synth_example(task: SynthTask, seed: u64, index: u64) -> QaExample {
    let scene = Scene::generate(task, seed, index);
    QaExample {
        id: format!("{}-{seed}-{index:05}", task.keyword()),
        question: scene.question(),
        answers: vec![scene.answer()],
        video: VideoSource::Synthetic { task, seed, index },
    }
}

/// `n` examples with indices `0..n`.
pub fn synth_dataset(task: SynthTask, n: usize, seed: u64) -> Result<Vec<QaExample>> {
    synth_range(task, seed, 0, n)
}

/// Examples with indices `start..start + n`; disjoint ranges give disjoint
/// splits under one seed.
pub fn synth_range(task: SynthTask, seed: u64, start: u64, n: usize) -> Result<Vec<QaExample>> {
    if n == 0 {
        return Err(Error::Input("synthetic dataset size must be at least 1".into()));
    }
    Ok((start..start + n as u64)
        .map(|i| synth_example(task, seed, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        for task in SynthTask::ALL {
            let a = synth_dataset(task, 20, 11).unwrap();
            let b = synth_dataset(task, 20, 11).unwrap();
            assert_eq!(a, b);
            let s = Scene::generate(task, 11, 5);
            assert_eq!(s.render(), Scene::generate(task, 11, 5).render());
        }
    }

    #[test]
    fn zero_examples_is_an_error() {
        assert!(synth_dataset(SynthTask::FrameColor, 0, 1).is_err());
    }

    #[test]
    fn temporal_orderings_are_balanced() {
        let n = 10_000;
        let ascending = (0..n)
            .filter(|i| {
                let s = Scene::generate(SynthTask::TemporalOrder, 3, *i);
                s.colors[0] < s.colors[1]
            })
            .count();
        let frac = ascending as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn temporal_first_and_middle_frames_show_only_the_first_colour() {
        let s = Scene::generate(SynthTask::TemporalOrder, 1, 0);
        assert_eq!(s.visible[0], Some(0));
        let mid = crate::ingest::sample_frames(SOURCE_FRAMES, 1).unwrap()[0];
        assert_eq!(s.visible[mid], Some(0));
        assert_eq!(s.visible[SOURCE_FRAMES - 1], Some(1));
    }

    #[test]
    fn repeat_counts_cover_one_to_four_uniformly() {
        let mut counts = [0usize; 4];
        for i in 0..8000 {
            let s = Scene::generate(SynthTask::RepeatCount, 9, i);
            counts[s.colors.len() - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 / 8000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn repeat_segments_are_separated_by_blank_frames() {
        for i in 0..50 {
            let s = Scene::generate(SynthTask::RepeatCount, 2, i);
            let mut blinks = 0;
            let mut prev = None;
            for v in &s.visible {
                if v.is_some() && prev.is_none() {
                    blinks += 1;
                }
                prev = *v;
            }
            assert_eq!(blinks, s.colors.len());
        }
    }

    #[test]
    fn descriptor_round_trip() {
        let ex = synth_example(SynthTask::RepeatCount, 4, 17);
        let src: VideoSource = ex.video.to_string().parse().unwrap();
        assert_eq!(src, ex.video);
    }
}
