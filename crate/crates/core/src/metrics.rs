//! Exact-match and IVQA scoring, predictions files, and evaluation reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::{parse_qa, QaExample};

/// How answer strings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// Lowercase, trim, collapse internal whitespace.
    #[default]
    Normalized,
    /// Byte equality.
    Raw,
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn matches(pred: &str, gt: &str, rule: MatchRule) -> bool {
    match rule {
        MatchRule::Normalized => normalize_answer(pred) == normalize_answer(gt),
        MatchRule::Raw => pred == gt,
    }
}

/// 1 if the normalised strings are equal, else 0.
pub fn exact_match(pred: &str, gt: &str) -> u8 {
    u8::from(matches(pred, gt, MatchRule::Normalized))
}

/// Mean over the five leave-one-out subsets of `min(matches / 2, 1)`.
pub fn ivqa_accuracy(pred: &str, answers: &[String]) -> Result<f64> {
    ivqa_with(pred, answers, MatchRule::Normalized)
}

fn ivqa_with(pred: &str, answers: &[String], rule: MatchRule) -> Result<f64> {
    if answers.len() != 5 {
        return Err(Error::Input(format!(
            "ivqa scoring needs exactly 5 answers, got {}",
            answers.len()
        )));
    }
    let hit: Vec<bool> = answers.iter().map(|a| matches(pred, a, rule)).collect();
    // Integer tenths keep the result on the exact 0.1 grid.
    let tenths: usize = (0..5)
        .map(|left_out| {
            let c = (0..5).filter(|i| *i != left_out && hit[*i]).count();
            5 * c.min(2)
        })
        .sum();
    Ok(tenths as f64 / 50.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Exact,
    Ivqa,
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EvalMode::Exact),
            "ivqa" => Ok(EvalMode::Ivqa),
            _ => Err(Error::Input(format!("unknown metric `{s}` (expected exact or ivqa)"))),
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub score: f64,
}

impl Prediction {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.id, self.answer, self.score)
    }
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Prediction>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f[0].is_empty() {
            return Err(Error::parse(path, i + 1, "expected `id<TAB>answer<TAB>score`"));
        }
        let score = f[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(path, i + 1, format!("bad score `{}`", f[2])))?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::parse(path, i + 1, format!("duplicate id `{}`", f[0])));
        }
        out.push(Prediction {
            id: f[0].to_string(),
            answer: f[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        s.push_str(&p.to_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskScore {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_examples: usize,
    pub accuracy: f64,
    /// Ground-truth examples without a prediction (scored 0).
    pub missing: usize,
    pub per_task: BTreeMap<String, TaskScore>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,n,accuracy\n");
        for (t, sc) in &self.per_task {
            s.push_str(&format!("{t},{},{:.6}\n", sc.n, sc.accuracy));
        }
        s.push_str(&format!("all,{},{:.6}\n", self.n_examples, self.accuracy));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.per_task.keys().map(String::len).max().unwrap_or(0).max(4);
        writeln!(f, "{:<width$}  {:>6}  {:>8}", "task", "n", "accuracy")?;
        for (t, sc) in &self.per_task {
            writeln!(f, "{t:<width$}  {:>6}  {:>8.4}", sc.n, sc.accuracy)?;
        }
        writeln!(f, "{:<width$}  {:>6}  {:>8.4}", "all", self.n_examples, self.accuracy)?;
        write!(f, "missing predictions: {}", self.missing)
    }
}

/// Joins predictions to ground truth by id and scores every GT example.
pub fn score(preds: &[Prediction], gt: &[QaExample], mode: EvalMode, rule: MatchRule) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let gt_ids: HashSet<&str> = gt.iter().map(|e| e.id.as_str()).collect();
    if let Some(p) = preds.iter().find(|p| !gt_ids.contains(p.id.as_str())) {
        return Err(Error::Input(format!("prediction for unknown id `{}`", p.id)));
    }
    let mut total = 0.0;
    let mut missing = 0;
    let mut tasks: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for ex in gt {
        let s = match by_id.get(ex.id.as_str()) {
            None => {
                missing += 1;
                0.0
            }
            Some(p) => match mode {
                EvalMode::Exact => {
                    f64::from(u8::from(ex.answers.iter().any(|a| matches(&p.answer, a, rule))))
                }
                EvalMode::Ivqa => ivqa_with(&p.answer, &ex.answers, rule)
                    .map_err(|e| Error::Input(format!("example `{}`: {e}", ex.id)))?,
            },
        };
        total += s;
        let t = tasks.entry(ex.video.task_label().to_string()).or_default();
        t.0 += 1;
        t.1 += s;
    }
    let n = gt.len();
    Ok(EvalReport {
        n_examples: n,
        accuracy: if n == 0 { 0.0 } else { total / n as f64 },
        missing,
        per_task: tasks
            .into_iter()
            .map(|(k, (n, s))| (k, TaskScore { n, accuracy: s / n as f64 }))
            .collect(),
    })
}

/// Scores a predictions file against a QA file.
pub fn evaluate(predictions: &Path, gt: &Path, mode: EvalMode, rule: MatchRule) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    let text = std::fs::read_to_string(gt).map_err(|e| Error::io(gt, e))?;
    score(&preds, &parse_qa(&text, gt)?, mode, rule)
}
