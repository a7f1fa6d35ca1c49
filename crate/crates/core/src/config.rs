//! Run configuration: a TOML file overlaid with `--key value` flags.
//!
//! Keys are the snake_case field names below; flags use the same names in
//! kebab-case. Unknown keys are rejected. Empty path strings mean "unset".
//! `STORYFORGE_CONFIG` names a default config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{LoadOptions, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_LAMBDA, DEFAULT_MU};
use crate::model::ModelConfig;
use crate::optim::DEFAULT_LR;
use crate::trainer::{Stage, TrainConfig, DEFAULT_PATIENCE};

pub const CONFIG_ENV: &str = "STORYFORGE_CONFIG";

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        /// Command-line overrides, one optional flag per config key.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Overrides {
            $($(#[doc = $doc])* #[arg(long, value_name = "VALUE")] pub $field: Option<$ty>,)*
        }

        impl Overrides {
            pub fn apply(&self, config: &mut RunConfig) {
                $(if let Some(v) = &self.$field {
                    config.$field = v.clone();
                })*
            }
        }
    };
}

run_config! {
    /// Seed of every random draw in the run.
    seed: u64 = 0,
    /// Training stage: 1, 2 or all.
    stage: Stage = Stage::All,
    lr: f64 = DEFAULT_LR,
    /// Weight of the ranking loss.
    lambda: f64 = DEFAULT_LAMBDA,
    /// Weight of the reconstruction loss.
    mu: f64 = DEFAULT_MU,
    batch_size: usize = 8,
    /// Optimizer steps in stage 1.
    max_steps: usize = 2000,
    /// Optimizer steps in stage 2.
    stage2_steps: usize = 500,
    /// Steps between validations; 0 means once per epoch.
    validate_every: usize = 0,
    /// Validations without improvement before stopping.
    patience: usize = DEFAULT_PATIENCE,
    /// Record elapsed milliseconds in training log entries.
    log_wall_time: bool = false,

    /// Photo feature width; 0 takes it from the training data.
    feature_dim: usize = 0,
    /// Hidden size of each photo-encoder direction.
    photo_hidden: usize = 16,
    attn_hidden: usize = 32,
    attn_proj: usize = 32,
    embed_dim: usize = 16,
    dec_hidden: usize = 32,
    mlp_hidden: usize = 32,
    max_photos: usize = 40,
    /// Content words kept per sentence.
    max_words: usize = 25,
    /// Sentences per story.
    sentences: usize = 5,
    /// Minimum corpus count for a vocabulary word.
    min_count: usize = 5,

    train_data: PathBuf = PathBuf::from("data/train.jsonl"),
    /// Validation albums; empty uses the training file.
    val_data: PathBuf = PathBuf::new(),
    vocab: PathBuf = PathBuf::from("data/vocab.txt"),
    /// Directory for checkpoints, logs, stories and resolved configs.
    output_dir: PathBuf = PathBuf::from("runs/storyforge"),
    /// Checkpoint to read; empty uses `<output_dir>/best.json`.
    checkpoint: PathBuf = PathBuf::new(),
    /// Generated stories to score; empty generates them from the checkpoint.
    stories: PathBuf = PathBuf::new(),
    /// Albums to decode or inspect; empty uses the validation file.
    eval_data: PathBuf = PathBuf::new(),
    /// Beam width for generation; 1 is greedy.
    beam_width: usize = 1,

    synth_albums: usize = 8,
    /// Albums written to `val_data` by synth-data; 0 writes none.
    synth_val_albums: usize = 0,
    synth_scenes_min: usize = 2,
    synth_scenes_max: usize = 3,
    synth_photos_min: usize = 1,
    synth_photos_max: usize = 3,
    synth_feature_dim: usize = 8,
    synth_clusters: usize = 10,
    synth_separation: f64 = 1.0,
    synth_noise: f64 = 0.1,
    /// Size of the pseudo-word pool for templates.
    synth_vocab: usize = 60,

    /// Random problems checked by grad-check.
    grad_check_seeds: u64 = 20,
    /// Comma-separated λ values swept with µ = 0.
    sweep_lambdas: String = "0.0,0.1,0.2,0.3,0.4,0.5".to_string(),
    /// Comma-separated µ values swept with λ = 0.2.
    sweep_mus: String = "0.0,0.2,0.4,0.6,0.8,1.0".to_string(),
}

fn non_empty(p: &Path) -> Option<&Path> {
    (!p.as_os_str().is_empty()).then_some(p)
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::Config(format!("bad grid value `{s}`")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `file`, or `STORYFORGE_CONFIG` when no file is given, then applies `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let path = file.map(Path::to_path_buf).or(env.filter(|p| !p.as_os_str().is_empty()));
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        overrides.apply(&mut config);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        parse_grid(&self.sweep_lambdas)?;
        parse_grid(&self.sweep_mus)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lambda: self.lambda,
            mu: self.mu,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            stage2_steps: self.stage2_steps,
            validate_every: self.validate_every,
            patience: self.patience,
            seed: self.seed,
            log_wall_time: self.log_wall_time,
        }
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            photo_hidden: self.photo_hidden,
            attn_hidden: self.attn_hidden,
            attn_proj: self.attn_proj,
            embed_dim: self.embed_dim,
            dec_hidden: self.dec_hidden,
            mlp_hidden: self.mlp_hidden,
            vocab_size,
            max_photos: self.max_photos,
            max_words: self.max_words,
            sentences: self.sentences,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_photos: self.max_photos,
            max_words: self.max_words,
            sentences: self.sentences,
            feature_dim: (self.feature_dim > 0).then_some(self.feature_dim),
        }
    }

    pub fn synth_spec(&self, albums: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            albums,
            scenes_per_album: (self.synth_scenes_min, self.synth_scenes_max),
            photos_per_scene: (self.synth_photos_min, self.synth_photos_max),
            feature_dim: self.synth_feature_dim,
            clusters: self.synth_clusters,
            cluster_separation: self.synth_separation,
            noise_scale: self.synth_noise,
            vocab_size: self.synth_vocab,
            sentences: self.sentences,
            seed,
        }
    }

    pub fn val_path(&self) -> &Path {
        non_empty(&self.val_data).unwrap_or(&self.train_data)
    }

    pub fn eval_path(&self) -> &Path {
        non_empty(&self.eval_data).unwrap_or_else(|| self.val_path())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        non_empty(&self.checkpoint).map_or_else(|| self.output_dir.join("best.json"), Path::to_path_buf)
    }

    pub fn stories_path(&self) -> Option<&Path> {
        non_empty(&self.stories)
    }

    /// Writes the resolved config as `<output_dir>/<command>.config.toml`.
    pub fn write_resolved(&self, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(format!("{command}.config.toml"));
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}
