//! Word-level tokenizer with a corpus-built vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocab {
    /// Adds words in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::default();
        for t in texts {
            for w in normalize_words(t) {
                v.insert(&w);
            }
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(id) = self.index.get(word) {
            return *id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= RESERVED.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vocab::default();
        for (i, line) in text.lines().enumerate() {
            let w = line.trim();
            if i < RESERVED.len() {
                if w != RESERVED[i] {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        format!("expected reserved token {}", RESERVED[i]),
                    ));
                }
                continue;
            }
            if w.is_empty() || v.id(w).is_some() {
                return Err(Error::parse(path, i + 1, "empty or duplicate token"));
            }
            v.insert(w);
        }
        Ok(v)
    }

    /// Ids of the words in `text` that exist in this vocabulary.
    pub fn known_ids(&self, text: &str) -> Vec<usize> {
        normalize_words(text)
            .iter()
            .filter_map(|w| self.id(w))
            .collect()
    }
}

/// Fixed-length id sequence; `pad_mask[i]` is true at padding positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl TextSequence {
    pub fn from_ids(ids: &[usize], max_len: usize) -> Self {
        let mut out: Vec<usize> = ids.iter().copied().take(max_len).collect();
        out.resize(max_len, PAD);
        let pad_mask = out.iter().map(|i| *i == PAD).collect();
        TextSequence {
            ids: out,
            pad_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.iter().all(|p| *p)
    }

    /// Ids before the first EOS or PAD.
    pub fn content(&self) -> &[usize] {
        let end = self
            .ids
            .iter()
            .position(|i| *i == EOS || *i == PAD)
            .unwrap_or(self.ids.len());
        &self.ids[..end]
    }
}

/// Words to ids with EOS appended, truncated (keeping EOS) and padded to
/// `max_len`. Empty text yields an all-PAD sequence.
pub fn tokenize_text(text: &str, vocab: &Vocab, max_len: usize) -> TextSequence {
    let mut ids: Vec<usize> = normalize_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    if !ids.is_empty() && max_len > 0 {
        ids.truncate(max_len - 1);
        ids.push(EOS);
    }
    TextSequence::from_ids(&ids, max_len)
}

/// Space-joined words up to the first EOS/PAD.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .take_while(|i| **i != EOS && **i != PAD)
        .map(|i| vocab.word(*i).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
