//! Prepared examples in, predictions out.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::decoder::DecodeMode;
use crate::error::{Error, Result};
use crate::ingest::{detokenize, normalize_words, Vocab};
use crate::metrics::{exact_match, Prediction};
use crate::model::{Model, Sample, Target};
use crate::params::ParamStore;
use crate::training::{AnswerVocab, Prepared};

/// How answers are read off the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    /// Beam search over the whole word vocabulary.
    Open,
    /// Beam search restricted to the words of an answer list.
    Masked,
    /// Classification head over a fixed answer set.
    Fc,
}

impl FromStr for Decoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Decoding::Open),
            "masked" => Ok(Decoding::Masked),
            "fc" => Ok(Decoding::Fc),
            other => Err(Error::Config(format!(
                "unknown decoding `{other}` (expected open, masked or fc)"
            ))),
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoding::Open => "open",
            Decoding::Masked => "masked",
            Decoding::Fc => "fc",
        })
    }
}

/// Word ids a masked decoder may emit so that every answer in `answers` is
/// reachable. Words unknown to `vocab` are skipped.
pub fn answer_mask(answers: &[String], vocab: &Vocab) -> Result<BTreeSet<usize>> {
    let ids: BTreeSet<usize> = answers
        .iter()
        .flat_map(|a| normalize_words(a))
        .filter_map(|w| vocab.id(&w))
        .collect();
    if ids.is_empty() {
        return Err(Error::Input("no answer word is in the model vocabulary".into()));
    }
    Ok(ids)
}

/// Everything `predict` needs besides the model.
#[derive(Debug, Clone)]
pub struct PredictOptions<'a> {
    pub decoding: Decoding,
    pub beam: usize,
    pub vocab: &'a Vocab,
    /// Answer list: the mask for `Masked`, the classes for `Fc`.
    pub answers: Option<&'a AnswerVocab>,
}

fn predict_one(model: &Model, store: &ParamStore, ex: &Prepared, opts: &PredictOptions<'_>, mode: &DecodeMode) -> Result<Prediction> {
    let fused = model.encode(store, &ex.sample.clips, &ex.sample.question)?;
    let (answer, score) = match opts.decoding {
        Decoding::Fc => {
            let answers = opts
                .answers
                .ok_or_else(|| Error::Input("fc decoding needs an answer vocabulary".into()))?;
            let probs = model.classify(store, &fused)?;
            let (best, p) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc });
            let answer = answers
                .answer(best)
                .ok_or_else(|| Error::Input(format!("class {best} is outside the answer vocabulary")))?;
            (answer.to_string(), p.ln())
        }
        Decoding::Open | Decoding::Masked => {
            let hyps = model.beam(store, &fused, opts.beam, mode)?;
            let best = &hyps[0];
            (detokenize(&best.tokens, opts.vocab), best.score)
        }
    };
    Ok(Prediction {
        id: ex.id.clone(),
        answer,
        score,
    })
}

/// One prediction per example, in input order.
pub fn predict(model: &Model, store: &ParamStore, data: &[Prepared], opts: &PredictOptions<'_>) -> Result<Vec<Prediction>> {
    if opts.beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mode = match opts.decoding {
        Decoding::Masked => {
            let answers = opts
                .answers
                .ok_or_else(|| Error::Input("masked decoding needs an answer list".into()))?;
            DecodeMode::Masked(answer_mask(answers.answers(), opts.vocab)?)
        }
        _ => DecodeMode::Open,
    };
    data.par_iter()
        .map(|ex| predict_one(model, store, ex, opts, &mode))
        .collect()
}

/// Exact-match accuracy of `preds` against the first answer of each
/// generative target or the class label of each classification target.
pub fn accuracy(preds: &[Prediction], data: &[Prepared], vocab: &Vocab, answers: Option<&AnswerVocab>) -> Result<f64> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(Error::Input(format!(
            "{} predictions for {} examples",
            preds.len(),
            data.len()
        )));
    }
    let mut hits = 0usize;
    for (p, ex) in preds.iter().zip(data) {
        let truth = match &ex.sample.target {
            Target::Text(t) => detokenize(t.content(), vocab),
            Target::Class(c) => answers
                .and_then(|a| a.answer(*c))
                .ok_or_else(|| Error::Input(format!("class {c} has no answer string")))?
                .to_string(),
        };
        hits += exact_match(&p.answer, &truth) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}

/// The samples of `data`, cloned, for the training loop.
pub fn samples(data: &[Prepared]) -> Vec<Sample> {
    data.iter().map(|p| p.sample.clone()).collect()
}
