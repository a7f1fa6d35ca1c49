//! Tokenization and vocabulary.
//!
//! Tokenizer: lowercase the text, split every ASCII punctuation character
//! into its own token, then split on whitespace.
//!
//! Vocabulary file: a header line
//! `#storyforge-vocab min_count=<n> specials=<pad>,<bos>,<eos>,<unk>`
//! followed by one token per line in id order, specials first.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_WORDS: usize = 25;

const HEADER_TAG: &str = "#storyforge-vocab";

pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens of `ids` up to (not including) the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "{HEADER_TAG} min_count={} specials={}\n",
            self.min_count,
            SPECIALS.join(",")
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let bad = |line: usize, message: String| Error::Record {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(bad(1, format!("expected `{HEADER_TAG}` header")));
        }
        let mut min_count = None;
        let mut specials_ok = false;
        for f in fields {
            if let Some(v) = f.strip_prefix("min_count=") {
                min_count = Some(v.parse().map_err(|_| bad(1, format!("bad min_count `{v}`")))?);
            } else if let Some(v) = f.strip_prefix("specials=") {
                specials_ok = v.split(',').eq(SPECIALS.iter().copied());
            }
        }
        let min_count = min_count.ok_or_else(|| bad(1, "missing min_count".into()))?;
        if !specials_ok {
            return Err(bad(1, "special tokens do not match".into()));
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(bad(i + 2, format!("expected special `{s}`")));
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(bad(i + 2, format!("invalid token `{t}`")));
            }
            if seen.insert(t.as_str(), i).is_some() {
                return Err(bad(i + 2, format!("duplicate token `{t}`")));
            }
        }
        Ok(Self::from_tokens(tokens, min_count))
    }
}

/// Builds a vocabulary from raw sentences. Tokens seen fewer than
/// `min_count` times are left out and encode as UNK. Ids after the specials
/// are ordered by descending count, ties broken lexicographically.
pub fn build_vocab<'a>(sentences: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for s in sentences {
        any = true;
        for t in tokenize(s) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any || counts.is_empty() {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, min_count))
}

/// At most `max_words` content ids followed by EOS.
pub fn encode_sentence<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_words: usize) -> Vec<usize> {
    tokens
        .iter()
        .take(max_words)
        .map(|t| vocab.id(t.as_ref()))
        .chain(std::iter::once(EOS))
        .collect()
}

/// Decoder inputs for a target sentence: BOS followed by every target except the last.
pub fn decoder_inputs(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(target.iter().copied().take(target.len().saturating_sub(1)))
        .collect()
}
