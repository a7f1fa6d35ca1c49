//! End-to-end gradient check of the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{random_derangement, AlbumExample, EOS};
use crate::error::Result;
use crate::gradcheck::{check_tape_fn, GradCheckReport};
use crate::losses::{album_objective, LossWeights};
use crate::model::{FlagMode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::NumArray;

/// Sizes of the random problems used by the pipeline gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub feature_dim: usize,
    pub photo_hidden: usize,
    pub vocab_size: usize,
    pub min_photos: usize,
    pub max_photos: usize,
    pub sentences: usize,
    pub max_sentence_words: usize,
    pub weights: LossWeights,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            photo_hidden: 6,
            vocab_size: 20,
            min_photos: 3,
            max_photos: 6,
            sentences: 3,
            max_sentence_words: 3,
            weights: LossWeights::default(),
        }
    }
}

impl GradCheckSetup {
    pub fn model(&self) -> Result<Model> {
        Model::new(ModelConfig {
            feature_dim: self.feature_dim,
            photo_hidden: self.photo_hidden,
            attn_hidden: 4,
            attn_proj: 4,
            embed_dim: 4,
            dec_hidden: 6,
            mlp_hidden: 6,
            vocab_size: self.vocab_size,
            max_photos: self.max_photos,
            max_words: self.max_sentence_words,
            sentences: self.sentences,
        })
    }
}

/// A random album, parameters, boundary flags and derangement for one seed.
pub struct GradCheckProblem {
    pub model: Model,
    pub params: ParamStore,
    pub album: AlbumExample,
    pub flags: Vec<bool>,
    pub derangement: Vec<usize>,
}

impl GradCheckProblem {
    pub fn new(setup: &GradCheckSetup, seed: u64) -> Result<Self> {
        let model = setup.model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init(&mut rng);
        let m = rng.random_range(setup.min_photos..=setup.max_photos);
        let features = (0..m)
            .map(|_| NumArray::vector((0..setup.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let story = (0..setup.sentences)
            .map(|_| {
                let len = rng.random_range(1..=setup.max_sentence_words);
                let mut s: Vec<usize> = (0..len).map(|_| rng.random_range(EOS + 2..setup.vocab_size)).collect();
                s.push(EOS);
                s
            })
            .collect();
        let flags = (0..m).map(|_| rng.random_bool(0.4)).collect();
        let derangement = random_derangement(setup.sentences, &mut rng);
        Ok(Self {
            model,
            params,
            album: AlbumExample {
                album_id: format!("check-{seed}"),
                features,
                stories: vec![story],
                reference_tokens: vec![],
                gold_boundaries: None,
            },
            flags,
            derangement,
        })
    }

    /// Checks the weighted objective with the boundary flags held fixed.
    pub fn check(&self, weights: LossWeights, delta: f64) -> Result<GradCheckReport> {
        let mode = FlagMode::Fixed(self.flags.clone());
        check_tape_fn(&self.params, delta, |tape, store| {
            let p = self.model.bind(tape, store)?;
            let loss = album_objective(tape, &p, &self.album, 0, Some(&self.derangement), weights, &mode)?;
            Ok(loss.total)
        })
    }
}

pub fn pipeline_grad_check(setup: &GradCheckSetup, seed: u64, delta: f64) -> Result<GradCheckReport> {
    GradCheckProblem::new(setup, seed)?.check(setup.weights, delta)
}
