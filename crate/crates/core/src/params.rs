//! Named parameter registry with freeze groups and a JSON checkpoint container.
//!
//! Checkpoint layout (one JSON document):
//!
//! ```text
//! {
//!   "format": "storyforge-checkpoint",
//!   "version": 1,
//!   "config": { ...resolved run configuration... },
//!   "params": [ { "name": "dec.embed", "group": "sentence_decoder",
//!                 "shape": [30, 16], "data": [ ...row-major... ] }, ... ],
//!   "frozen": [ "photo_encoder", ... ],
//!   "optimizer": { "step": 120, "moments": [ { "name", "m", "v" }, ... ] } | null
//! }
//! ```
//!
//! Entries are sorted by name and values are written with shortest
//! round-trip formatting, so identical parameters give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::NumArray;

pub const PHOTO_ENCODER: &str = "photo_encoder";
pub const SCENE_ENCODER: &str = "scene_encoder";
pub const ATTENTION: &str = "attention";
pub const SENTENCE_DECODER: &str = "sentence_decoder";
pub const RECONSTRUCTOR: &str = "reconstructor";

pub const GROUPS: [&str; 5] = [
    PHOTO_ENCODER,
    SCENE_ENCODER,
    ATTENTION,
    SENTENCE_DECODER,
    RECONSTRUCTOR,
];

pub const CHECKPOINT_FORMAT: &str = "storyforge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, NumArray>,
    group_of: BTreeMap<String, String>,
    groups: BTreeMap<String, BTreeSet<String>>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: &str, name: &str, value: NumArray) {
        if let Some(old) = self.group_of.insert(name.to_string(), group.to_string()) {
            if let Some(set) = self.groups.get_mut(&old) {
                set.remove(name);
            }
        }
        self.groups
            .entry(group.to_string())
            .or_default()
            .insert(name.to_string());
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&NumArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NumArray> {
        self.entries.get_mut(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &NumArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut NumArray)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.group_of.get(name).map(String::as_str)
    }

    pub fn group_members(&self, group: &str) -> impl Iterator<Item = &str> {
        self.groups
            .get(group)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.group_of
            .get(name)
            .is_some_and(|g| self.frozen.contains(g))
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .accumulate_grad(grad)
    }

    pub fn zero_grads(&mut self) {
        for v in self.entries.values_mut() {
            v.clear_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(NumArray::len).sum()
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)); vectors count as one output row.
    pub fn glorot<R: Rng>(rng: &mut R, shape: &[usize]) -> NumArray {
        let (fan_out, fan_in) = match shape {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => panic!("glorot init expects a vector or matrix"),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        NumArray::new(shape.to_vec(), data).expect("glorot shape")
    }

    pub fn save(&self, path: &Path, config: serde_json::Value, optimizer: Option<&AdamState>) -> Result<()> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            params: self
                .entries
                .iter()
                .map(|(name, v)| ParamRecord {
                    name: name.clone(),
                    group: self.group_of[name].clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                })
                .collect(),
            frozen: self.frozen.iter().cloned().collect(),
            optimizer: optimizer.cloned(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", doc.version)));
        }
        let mut store = ParamStore::new();
        for p in doc.params {
            let array = NumArray::new(p.shape, p.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            store.insert(&p.group, &p.name, array);
        }
        for g in doc.frozen {
            store.freeze(&g);
        }
        Ok(Checkpoint {
            params: store,
            config: doc.config,
            optimizer: doc.optimizer,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: serde_json::Value,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: serde_json::Value,
    params: Vec<ParamRecord>,
    frozen: Vec<String>,
    optimizer: Option<AdamState>,
}
