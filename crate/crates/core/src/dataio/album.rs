//! Album files: one JSON object per line.
//!
//! ```text
//! {"album_id": "a1",
//!  "features": [[f64; F], ...],                 // one row per photo, in order
//!  "stories": [["sentence one", ...], ...],     // each story has n sentences
//!  "gold_boundaries": [0, 1, 0, ...]}           // optional, one flag per photo
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::vocab::{encode_sentence, tokenize, Vocabulary, DEFAULT_MAX_WORDS};
use crate::error::{Error, Result};
use crate::tensor::NumArray;

pub const DEFAULT_MAX_PHOTOS: usize = 40;
pub const DEFAULT_SENTENCES: usize = 5;
pub const DEFAULT_FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlbumRecord {
    pub album_id: String,
    pub features: Vec<Vec<f64>>,
    pub stories: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_boundaries: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub max_photos: usize,
    pub max_words: usize,
    pub sentences: usize,
    /// Expected feature width; `None` takes it from the first record.
    pub feature_dim: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_photos: DEFAULT_MAX_PHOTOS,
            max_words: DEFAULT_MAX_WORDS,
            sentences: DEFAULT_SENTENCES,
            feature_dim: None,
        }
    }
}

/// One album with its encoded references.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbumExample {
    pub album_id: String,
    pub features: Vec<NumArray>,
    /// `stories[r][j]` is sentence j of reference r as ids ending in EOS.
    pub stories: Vec<Vec<Vec<usize>>>,
    /// Raw tokens of each reference story, sentences concatenated, for scoring.
    pub reference_tokens: Vec<Vec<String>>,
    pub gold_boundaries: Option<Vec<u8>>,
}

impl AlbumExample {
    pub fn photo_count(&self) -> usize {
        self.features.len()
    }

    pub fn from_record(record: &AlbumRecord, vocab: &Vocabulary, opts: &LoadOptions) -> std::result::Result<Self, String> {
        if record.features.is_empty() {
            return Err("album has no photos".into());
        }
        let width = opts.feature_dim.unwrap_or(record.features[0].len());
        if width == 0 {
            return Err("feature vectors are empty".into());
        }
        let kept = record.features.len().min(opts.max_photos);
        let mut features = Vec::with_capacity(kept);
        for (i, f) in record.features.iter().take(kept).enumerate() {
            if f.len() != width {
                return Err(format!("photo {i} has feature dim {}, expected {width}", f.len()));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(format!("photo {i} has a non-finite feature"));
            }
            features.push(NumArray::vector(f.clone()));
        }
        if record.stories.is_empty() {
            return Err("album has no stories".into());
        }
        let mut stories = Vec::with_capacity(record.stories.len());
        let mut reference_tokens = Vec::with_capacity(record.stories.len());
        for (r, story) in record.stories.iter().enumerate() {
            if story.len() != opts.sentences {
                return Err(format!(
                    "story {r} has {} sentences, expected {}",
                    story.len(),
                    opts.sentences
                ));
            }
            let mut encoded = Vec::with_capacity(story.len());
            let mut raw = Vec::new();
            for sentence in story {
                let tokens = tokenize(sentence);
                encoded.push(encode_sentence(&tokens, vocab, opts.max_words));
                raw.extend(tokens);
            }
            stories.push(encoded);
            reference_tokens.push(raw);
        }
        let gold_boundaries = match &record.gold_boundaries {
            None => None,
            Some(g) => {
                if g.len() != record.features.len() {
                    return Err(format!(
                        "gold_boundaries has {} flags for {} photos",
                        g.len(),
                        record.features.len()
                    ));
                }
                if g.iter().any(|&b| b > 1) {
                    return Err("gold_boundaries must be 0 or 1".into());
                }
                Some(g[..kept].to_vec())
            }
        };
        Ok(Self {
            album_id: record.album_id.clone(),
            features,
            stories,
            reference_tokens,
            gold_boundaries,
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<AlbumRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AlbumRecord = serde_json::from_str(line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[AlbumRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and encodes an album file. Photo streams longer than
/// `max_photos` keep their first `max_photos` photos; all albums must share
/// one feature width.
pub fn load_albums(path: &Path, vocab: &Vocabulary, opts: &LoadOptions) -> Result<Vec<AlbumExample>> {
    let text = fs::read_to_string(path)?;
    let mut opts = *opts;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: AlbumRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let example = AlbumExample::from_record(&record, vocab, &opts).map_err(fail)?;
        opts.feature_dim.get_or_insert(example.features[0].len());
        out.push(example);
    }
    Ok(out)
}
