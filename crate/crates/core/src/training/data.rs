//! Turning QA records into model-ready samples.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::completion_batch;
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::ingest::{
    clips_for_config, load_video, normalize_words, tokenize_text, QaExample, VideoClip, Vocab,
};
use crate::model::{Sample, Target};

/// Word vocabulary over every question and answer, in first-seen order.
pub fn build_vocab(examples: &[QaExample]) -> Vocab {
    let mut v = Vocab::default();
    for ex in examples {
        for w in normalize_words(&ex.question) {
            v.insert(&w);
        }
        for a in &ex.answers {
            for w in normalize_words(a) {
                v.insert(&w);
            }
        }
    }
    v
}

/// The fixed answer set of the classification head: the most frequent
/// normalised answers, ties broken by first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocab {
    answers: Vec<String>,
}

impl AnswerVocab {
    pub fn build(examples: &[QaExample], size: usize) -> Self {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for ex in examples {
            for a in &ex.answers {
                let key = normalize_words(a).join(" ");
                let next = counts.len();
                counts.entry(key).or_insert((0, next)).0 += 1;
            }
        }
        let mut all: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        all.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        AnswerVocab {
            answers: all.into_iter().take(size).map(|(a, _)| a).collect(),
        }
    }

    pub fn from_answers(answers: Vec<String>) -> Self {
        AnswerVocab { answers }
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        let key = normalize_words(answer).join(" ");
        self.answers.iter().position(|a| *a == key)
    }

    pub fn answer(&self, i: usize) -> Option<&str> {
        self.answers.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.answers.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(AnswerVocab {
            answers: text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
        })
    }
}

/// A sample together with the record it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub task: String,
    pub sample: Sample,
}

/// Loads videos and tokenizes text for every example. With `answers` the
/// target is the class of the first answer and examples whose answers are
/// all outside the answer set are dropped; otherwise the target is the
/// first answer's text.
pub fn prepare_samples(
    examples: &[QaExample],
    vocab: &Vocab,
    answers: Option<&AnswerVocab>,
    cfg: &ValidatedConfig,
    base: &Path,
) -> Result<Vec<Prepared>> {
    if vocab.len() > cfg.vocab_size {
        return Err(Error::Config(format!(
            "the data has {} distinct words but vocab_size is {}; raise vocab_size",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let out: Vec<Option<Prepared>> = examples
        .par_iter()
        .map(|ex| -> Result<Option<Prepared>> {
            let target = match answers {
                Some(av) => match ex.answers.iter().find_map(|a| av.index(a)) {
                    Some(c) => Target::Class(c),
                    None => return Ok(None),
                },
                None => Target::Text(tokenize_text(&ex.answers[0], vocab, cfg.text_max_len)),
            };
            let video = load_video(&ex.video, base)?;
            Ok(Some(Prepared {
                id: ex.id.clone(),
                task: ex.video.task_label().to_string(),
                sample: Sample {
                    clips: clips_for_config(&video, cfg)?,
                    question: tokenize_text(&ex.question, vocab, cfg.text_max_len),
                    target,
                },
            }))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Generative-completion sample: the first half of the caption is the
/// question and the second half the target.
pub fn completion_sample(caption: &str, vocab: &Vocab, clips: Vec<VideoClip>, text_len: usize) -> Result<Sample> {
    let words = normalize_words(caption);
    let (first, second) = completion_batch(&words)?;
    let question = tokenize_text(&first.join(" "), vocab, text_len);
    let target = tokenize_text(&second.join(" "), vocab, text_len);
    Ok(Sample {
        clips,
        question,
        target: Target::Text(target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::ingest::{synth_dataset, SynthTask, EOS};

    #[test]
    fn answer_vocab_orders_by_frequency() {
        let mut ex = synth_dataset(SynthTask::FrameColor, 3, 0).unwrap();
        ex[0].answers = vec!["Blue".into()];
        ex[1].answers = vec!["red".into()];
        ex[2].answers = vec!["red".into()];
        let av = AnswerVocab::build(&ex, 5);
        assert_eq!(av.answers(), &["red".to_string(), "blue".to_string()]);
        assert_eq!(av.index("BLUE"), Some(1));
        assert_eq!(AnswerVocab::build(&ex, 1).len(), 1);
    }

    #[test]
    fn prepared_targets_follow_objective() {
        let cfg = preset("toy").unwrap().validate().unwrap();
        let ex = synth_dataset(SynthTask::RepeatCount, 4, 2).unwrap();
        let vocab = build_vocab(&ex);
        let gen = prepare_samples(&ex, &vocab, None, &cfg, Path::new(".")).unwrap();
        let Target::Text(t) = &gen[0].sample.target else { panic!() };
        assert_eq!(t.ids[1], EOS);
        assert_eq!(gen[0].task, "repeat_count");
        let av = AnswerVocab::build(&ex, 8);
        let fc = prepare_samples(&ex, &vocab, Some(&av), &cfg, Path::new(".")).unwrap();
        assert!(matches!(fc[0].sample.target, Target::Class(_)));
        assert_eq!(fc.len(), 4);
    }

    #[test]
    fn completion_uses_both_halves() {
        let vocab = Vocab::build(["a man slices an onion"]);
        let s = completion_sample("a man slices an onion", &vocab, Vec::new(), 6).unwrap();
        assert_eq!(s.question.content(), &[3, 4]);
        let Target::Text(t) = s.target else { panic!() };
        assert_eq!(t.content(), &[5, 6, 7]);
        assert!(completion_sample("onion", &vocab, Vec::new(), 6).is_err());
    }
}
