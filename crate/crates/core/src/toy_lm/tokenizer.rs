//! Sub-word tokenizer: byte-pair style merges learned from a corpus, applied
//! at inference by greedy longest match inside each pre-token.
//!
//! Pre-tokens are a run of alphanumerics (optionally led by one space) or a
//! single other character, so a split between words never changes how either
//! side is segmented.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Longest merged unit, in characters (a leading space counts).
pub const DEFAULT_MAX_TOKEN_CHARS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    max_chars: usize,
}

/// Splits text into pre-tokens.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut word = false;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            match start {
                Some(_) if word => {}
                // a pending lone space absorbs the word that follows it
                Some(s) if &text[s..i] == " " => word = true,
                Some(s) => {
                    out.push(&text[s..i]);
                    start = Some(i);
                    word = true;
                }
                None => {
                    start = Some(i);
                    word = true;
                }
            }
        } else {
            if let Some(s) = start {
                out.push(&text[s..i]);
            }
            if c == ' ' {
                start = Some(i);
                word = false;
            } else {
                out.push(&text[i..i + c.len_utf8()]);
                start = None;
                word = false;
            }
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

impl Tokenizer {
    /// Learns a vocabulary of `target_size` entries: the two specials, every
    /// character seen in `corpus`, then the most frequent adjacent merges.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize, max_chars: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("tokenizer corpus is empty".into()));
        }
        let mut words: BTreeMap<&str, u64> = BTreeMap::new();
        let mut chars = BTreeSet::new();
        for line in corpus {
            for w in pretokenize(line.as_ref()) {
                *words.entry(w).or_default() += 1;
                chars.extend(w.chars().filter(|&c| c != '\n' && c != '\r'));
            }
        }
        let base = 2 + chars.len();
        if target_size < base {
            return Err(Error::Config(format!(
                "vocab target {target_size} is below the {base} entries needed for specials and characters"
            )));
        }

        let mut vocab: Vec<String> = vec![BOS.to_string(), UNK.to_string()];
        vocab.extend(chars.iter().map(|c| c.to_string()));

        let mut segmented: Vec<(Vec<String>, u64)> = words
            .iter()
            .map(|(w, &n)| (w.chars().map(|c| c.to_string()).collect(), n))
            .collect();

        while vocab.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (symbols, n) in &segmented {
                for w in symbols.windows(2) {
                    if w[0].chars().count() + w[1].chars().count() <= max_chars {
                        *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
                    }
                }
            }
            // highest count wins; BTreeMap order breaks ties lexicographically
            let Some(((a, b), _)) = pairs
                .iter()
                .fold(None::<(&(&str, &str), u64)>, |best, (k, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((k, v)),
                })
                .map(|(k, v)| (*k, v))
            else {
                break;
            };
            let merged = format!("{a}{b}");
            let (a, b) = (a.to_string(), b.to_string());
            for (symbols, _) in segmented.iter_mut() {
                let mut i = 0;
                let mut out = Vec::with_capacity(symbols.len());
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut symbols[i]));
                        i += 1;
                    }
                }
                *symbols = out;
            }
            vocab.push(merged);
        }
        Ok(Self::from_vocab(vocab))
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let max_chars = vocab
            .iter()
            .filter(|t| *t != BOS && *t != UNK)
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Self {
            vocab,
            index,
            max_chars,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    fn lookup(&self, piece: &str) -> Option<u32> {
        if piece == BOS || piece == UNK {
            return None;
        }
        self.index.get(piece).copied()
    }

    /// Greedy longest-match segmentation. Characters missing from the
    /// vocabulary become one `<unk>` each.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pretokenize(text) {
            let bounds: Vec<usize> = word
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(word.len()))
                .collect();
            let n = bounds.len() - 1;
            let mut i = 0;
            while i < n {
                let mut matched = None;
                for len in (1..=self.max_chars.min(n - i)).rev() {
                    if let Some(id) = self.lookup(&word[bounds[i]..bounds[i + len]]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                let (id, len) = matched.unwrap_or((UNK_ID, 1));
                ids.push(id);
                i += len;
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id {
                BOS_ID => "",
                UNK_ID => "\u{FFFD}",
                _ => self.token(id),
            })
            .collect()
    }

    /// One vocabulary entry per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.vocab.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        let vocab: Vec<String> = body.split('\n').map(str::to_string).collect();
        if vocab.len() < 2 || vocab[0] != BOS || vocab[1] != UNK {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with {BOS} and {UNK}",
                path.display()
            )));
        }
        Ok(Self::from_vocab(vocab))
    }
}
