//! The photo-scene encoder, attention decoder and reconstructor.

pub mod decoder;
pub mod photo;
pub mod recon;
pub mod scene;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{GruCell, GruWeights};
use crate::params::{ParamStore, ATTENTION, PHOTO_ENCODER, RECONSTRUCTOR, SCENE_ENCODER, SENTENCE_DECODER};
use crate::tape::{Tape, Var};
use crate::tensor::NumArray;

pub use decoder::{attend, generate_story, sentence_log_prob, AttentionState, DecodeMode, StoryHypothesis};
pub use photo::{encode_photos, PhotoEncoding};
pub use recon::reconstruct;
pub use scene::{detect_boundary, encode_scenes, FlagMode, SceneSegmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden size of each photo-encoder direction; photo vectors are twice this.
    pub photo_hidden: usize,
    pub attn_hidden: usize,
    pub attn_proj: usize,
    pub embed_dim: usize,
    pub dec_hidden: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_photos: usize,
    pub max_words: usize,
    pub sentences: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            photo_hidden: 16,
            attn_hidden: 16,
            attn_proj: 16,
            embed_dim: 16,
            dec_hidden: 32,
            mlp_hidden: 32,
            vocab_size: 32,
            max_photos: 40,
            max_words: 25,
            sentences: 5,
        }
    }
}

impl ModelConfig {
    /// Width of photo and scene representations.
    pub fn repr_dim(&self) -> usize {
        2 * self.photo_hidden
    }

    /// Padded attention length: one column per photo, one scene slot per
    /// photo position, and the closing scene slot.
    pub fn attn_len(&self) -> usize {
        2 * self.max_photos + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("photo_hidden", self.photo_hidden),
            ("attn_hidden", self.attn_hidden),
            ("attn_proj", self.attn_proj),
            ("embed_dim", self.embed_dim),
            ("dec_hidden", self.dec_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("max_photos", self.max_photos),
            ("sentences", self.sentences),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::dataio::UNK {
            return Err(Error::Config("vocab_size must exceed the special tokens".into()));
        }
        Ok(())
    }
}

pub mod names {
    pub const SKIP: &str = "photo.skip.w";
    pub const PHOTO_FWD: &str = "photo.fwd";
    pub const PHOTO_BWD: &str = "photo.bwd";
    pub const DET_V: &str = "scene.detector.w_sv";
    pub const DET_H: &str = "scene.detector.w_sh";
    pub const DET_B: &str = "scene.detector.b_s";
    pub const SCENE_GRU: &str = "scene.gru";
    pub const ATTN_GRU: &str = "attn.gru";
    pub const ATTN_INIT_W: &str = "attn.init.w";
    pub const ATTN_INIT_B: &str = "attn.init.b";
    pub const W_ALPHA: &str = "attn.w_alpha";
    pub const W_ALPHA_H: &str = "attn.w_alpha_h";
    pub const W_ALPHA_R: &str = "attn.w_alpha_r";
    pub const B_ALPHA: &str = "attn.b_alpha";
    pub const EMBED: &str = "dec.embed";
    pub const DEC_GRU: &str = "dec.gru";
    pub const MLP_W1: &str = "dec.mlp.w1";
    pub const MLP_B1: &str = "dec.mlp.b1";
    pub const MLP_W2: &str = "dec.mlp.w2";
    pub const MLP_B2: &str = "dec.mlp.b2";
    pub const RECON_GRU: &str = "recon.gru";
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn photo_fwd(&self) -> GruWeights {
        GruWeights::named(names::PHOTO_FWD, self.config.feature_dim, self.config.photo_hidden)
    }

    pub fn photo_bwd(&self) -> GruWeights {
        GruWeights::named(names::PHOTO_BWD, self.config.feature_dim, self.config.photo_hidden)
    }

    pub fn scene_gru(&self) -> GruWeights {
        let d = self.config.repr_dim();
        GruWeights::named(names::SCENE_GRU, d, d)
    }

    pub fn attn_gru(&self) -> GruWeights {
        GruWeights::named(names::ATTN_GRU, self.config.attn_len(), self.config.attn_hidden)
    }

    pub fn dec_gru(&self) -> GruWeights {
        GruWeights::named(
            names::DEC_GRU,
            self.config.embed_dim + self.config.repr_dim(),
            self.config.dec_hidden,
        )
    }

    pub fn recon_gru(&self) -> GruWeights {
        GruWeights::named(names::RECON_GRU, 2 * self.config.vocab_size, self.config.repr_dim())
    }

    /// Fresh parameters: Glorot-uniform matrices, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let c = &self.config;
        let d = c.repr_dim();
        let mut s = ParamStore::new();
        let mat = |s: &mut ParamStore, group: &str, name: &str, shape: &[usize], rng: &mut R| {
            s.insert(group, name, ParamStore::glorot(rng, shape));
        };

        self.photo_fwd().register(&mut s, PHOTO_ENCODER, rng);
        self.photo_bwd().register(&mut s, PHOTO_ENCODER, rng);
        mat(&mut s, PHOTO_ENCODER, names::SKIP, &[d, c.feature_dim], rng);

        mat(&mut s, SCENE_ENCODER, names::DET_V, &[d], rng);
        mat(&mut s, SCENE_ENCODER, names::DET_H, &[d], rng);
        s.insert(SCENE_ENCODER, names::DET_B, NumArray::zeros(&[1]));
        self.scene_gru().register(&mut s, SCENE_ENCODER, rng);

        self.attn_gru().register(&mut s, ATTENTION, rng);
        mat(&mut s, ATTENTION, names::ATTN_INIT_W, &[c.attn_hidden, d], rng);
        s.insert(ATTENTION, names::ATTN_INIT_B, NumArray::zeros(&[c.attn_hidden]));
        mat(&mut s, ATTENTION, names::W_ALPHA, &[c.attn_proj], rng);
        mat(&mut s, ATTENTION, names::W_ALPHA_H, &[c.attn_proj, c.attn_hidden], rng);
        mat(&mut s, ATTENTION, names::W_ALPHA_R, &[c.attn_proj, d], rng);
        s.insert(ATTENTION, names::B_ALPHA, NumArray::zeros(&[c.attn_proj]));

        mat(&mut s, SENTENCE_DECODER, names::EMBED, &[c.vocab_size, c.embed_dim], rng);
        self.dec_gru().register(&mut s, SENTENCE_DECODER, rng);
        mat(&mut s, SENTENCE_DECODER, names::MLP_W1, &[c.mlp_hidden, c.dec_hidden + d], rng);
        s.insert(SENTENCE_DECODER, names::MLP_B1, NumArray::zeros(&[c.mlp_hidden]));
        mat(&mut s, SENTENCE_DECODER, names::MLP_W2, &[c.vocab_size, c.mlp_hidden], rng);
        s.insert(SENTENCE_DECODER, names::MLP_B2, NumArray::zeros(&[c.vocab_size]));

        self.recon_gru().register(&mut s, RECONSTRUCTOR, rng);
        s
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<Bound> {
        let c = &self.config;
        let d = c.repr_dim();
        let mut p = |name: &str, shape: &[usize]| -> Result<Var> {
            let array = store
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if array.shape() != shape {
                return Err(Error::dim(name, shape, array.shape()));
            }
            tape.param(store, name)
        };
        let skip = p(names::SKIP, &[d, c.feature_dim])?;
        let det_v = p(names::DET_V, &[d])?;
        let det_h = p(names::DET_H, &[d])?;
        let det_b = p(names::DET_B, &[1])?;
        let attn_init_w = p(names::ATTN_INIT_W, &[c.attn_hidden, d])?;
        let attn_init_b = p(names::ATTN_INIT_B, &[c.attn_hidden])?;
        let w_alpha = p(names::W_ALPHA, &[c.attn_proj])?;
        let w_alpha_h = p(names::W_ALPHA_H, &[c.attn_proj, c.attn_hidden])?;
        let w_alpha_r = p(names::W_ALPHA_R, &[c.attn_proj, d])?;
        let b_alpha = p(names::B_ALPHA, &[c.attn_proj])?;
        let embed = p(names::EMBED, &[c.vocab_size, c.embed_dim])?;
        let mlp_w1 = p(names::MLP_W1, &[c.mlp_hidden, c.dec_hidden + d])?;
        let mlp_b1 = p(names::MLP_B1, &[c.mlp_hidden])?;
        let mlp_w2 = p(names::MLP_W2, &[c.vocab_size, c.mlp_hidden])?;
        let mlp_b2 = p(names::MLP_B2, &[c.vocab_size])?;
        Ok(Bound {
            config: *c,
            photo_fwd: self.photo_fwd().bind(tape, store)?,
            photo_bwd: self.photo_bwd().bind(tape, store)?,
            skip,
            det_v,
            det_h,
            det_b,
            scene: self.scene_gru().bind(tape, store)?,
            attn: self.attn_gru().bind(tape, store)?,
            attn_init_w,
            attn_init_b,
            w_alpha,
            w_alpha_h,
            w_alpha_r,
            b_alpha,
            embed,
            dec: self.dec_gru().bind(tape, store)?,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            recon: self.recon_gru().bind(tape, store)?,
        })
    }
}

/// Model parameters bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub config: ModelConfig,
    pub photo_fwd: GruCell,
    pub photo_bwd: GruCell,
    pub skip: Var,
    pub det_v: Var,
    pub det_h: Var,
    pub det_b: Var,
    pub scene: GruCell,
    pub attn: GruCell,
    pub attn_init_w: Var,
    pub attn_init_b: Var,
    pub w_alpha: Var,
    pub w_alpha_h: Var,
    pub w_alpha_r: Var,
    pub b_alpha: Var,
    pub embed: Var,
    pub dec: GruCell,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub recon: GruCell,
}

/// Attention memory of one album: photo columns, scene slots and their validity.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    /// Stacked `[L_max × D_v]` matrix R; invalid rows are zero.
    pub columns: Var,
    /// Individual rows of R, `None` where the slot is padding or a false scene.
    pub rows: Vec<Option<Var>>,
    pub mask: Vec<bool>,
}

impl AttentionMemory {
    /// Lays out `[photos | per-photo scene slots | closing scene]` at fixed positions.
    pub fn build(tape: &mut Tape, config: &ModelConfig, photos: &PhotoEncoding, scenes: &SceneSegmentation) -> Self {
        let len = config.attn_len();
        let max = config.max_photos;
        let m = photos.v.len();
        let mut rows: Vec<Option<Var>> = vec![None; len];
        for (i, v) in photos.v.iter().enumerate() {
            rows[i] = Some(*v);
        }
        let slots = scenes.rows.len();
        for (s, row) in scenes.rows.iter().enumerate() {
            let pos = if s + 1 == slots { len - 1 } else { max + s };
            debug_assert!(s + 1 == slots || s < m);
            rows[pos] = *row;
        }
        let zero = tape.zeros(config.repr_dim());
        let stacked: Vec<Var> = rows.iter().map(|r| r.unwrap_or(zero)).collect();
        let columns = tape.stack(&stacked);
        let mask = rows.iter().map(Option::is_some).collect();
        Self { columns, rows, mask }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}
