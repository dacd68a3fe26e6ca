//! The tab-separated QA file format.
//!
//! One record per line: `id`, `question`, answers joined by `|`, and either a
//! video path or a synthetic descriptor `synth:<task>:<seed>:<index>`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synth::SynthTask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VideoSource {
    Synthetic {
        task: SynthTask,
        seed: u64,
        index: u64,
    },
    Path(PathBuf),
}

impl fmt::Display for VideoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VideoSource::Synthetic { task, seed, index } => {
                write!(f, "synth:{}:{seed}:{index}", task.keyword())
            }
            VideoSource::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for VideoSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synth:") else {
            return Ok(VideoSource::Path(PathBuf::from(s)));
        };
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::Input(format!("bad synthetic descriptor `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(VideoSource::Synthetic {
            task: parts[0].parse()?,
            seed: parts[1].parse().map_err(|_| bad())?,
            index: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

impl VideoSource {
    /// Task label used for per-task breakdowns.
    pub fn task_label(&self) -> &str {
        match self {
            VideoSource::Synthetic { task, .. } => task.keyword(),
            VideoSource::Path(_) => "default",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub video: VideoSource,
}

impl QaExample {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.id,
            self.question,
            self.answers.join("|"),
            self.video
        )
    }

    fn parse_line(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let answers: Vec<String> = fields[2].split('|').map(str::to_string).collect();
        if fields[0].is_empty() {
            return Err(Error::parse(path, lineno, "empty id"));
        }
        if answers.iter().any(String::is_empty) || answers.len() > 5 {
            return Err(Error::parse(path, lineno, "answers must be 1 to 5 non-empty strings"));
        }
        let video = fields[3]
            .parse()
            .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        Ok(QaExample {
            id: fields[0].to_string(),
            question: fields[1].to_string(),
            answers,
            video,
        })
    }
}

pub fn parse_qa(text: &str, path: &Path) -> Result<Vec<QaExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex = QaExample::parse_line(line, path, i + 1)?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::parse(path, i + 1, format!("duplicate id `{}`", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qa(&text, path)
}

pub fn write_qa(examples: &[QaExample], path: &Path) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&ex.to_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let ex = QaExample {
            id: "q1".into(),
            question: "what color is the shape".into(),
            answers: vec!["red".into(), "dark red".into()],
            video: "synth:frame_color:7:3".parse().unwrap(),
        };
        let back = parse_qa(&ex.to_line(), Path::new("m")).unwrap();
        assert_eq!(back, vec![ex]);
    }

    #[test]
    fn path_sources_are_kept_verbatim() {
        let v: VideoSource = "videos/clip_01".parse().unwrap();
        assert_eq!(v, VideoSource::Path("videos/clip_01".into()));
        assert_eq!(v.task_label(), "default");
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "a\tq\tx\tv.txt\nb\tq\n";
        let err = parse_qa(text, Path::new("gt.tsv")).unwrap_err().to_string();
        assert!(err.starts_with("gt.tsv:2:"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "a\tq\tx\tv.txt\na\tq\ty\tv.txt\n";
        assert!(parse_qa(text, Path::new("gt.tsv")).is_err());
    }

    #[test]
    fn too_many_answers_are_rejected() {
        assert!(parse_qa("a\tq\t1|2|3|4|5|6\tv\n", Path::new("gt")).is_err());
    }
}
