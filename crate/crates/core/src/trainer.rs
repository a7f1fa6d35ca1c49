//! Two-stage training with CIDEr early stopping.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{random_derangement, AlbumExample, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{album_objective, LossReport, LossWeights};
use crate::metrics::{cider, EvalPair};
use crate::model::{generate_story, DecodeMode, FlagMode, Model};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamStore, ATTENTION, PHOTO_ENCODER, RECONSTRUCTOR, SCENE_ENCODER};
use crate::tape::Tape;

pub const DEFAULT_PATIENCE: usize = 30;
pub const STAGE2_FROZEN: [&str; 3] = [PHOTO_ENCODER, SCENE_ENCODER, ATTENTION];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    All,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "all" => Ok(Stage::All),
            other => Err(Error::Config(format!("stage must be 1, 2 or all, got `{other}`"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub mu: f64,
    pub batch_size: usize,
    /// Optimizer steps for stage 1.
    pub max_steps: usize,
    /// Optimizer steps for stage 2.
    pub stage2_steps: usize,
    /// Steps between validations; 0 validates once per epoch.
    pub validate_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: crate::optim::DEFAULT_LR,
            lambda: crate::losses::DEFAULT_LAMBDA,
            mu: crate::losses::DEFAULT_MU,
            batch_size: 8,
            max_steps: 2000,
            stage2_steps: 500,
            validate_every: 0,
            patience: DEFAULT_PATIENCE,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("lambda and mu must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One training example: an album paired with one of its references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleRef {
    pub album: usize,
    pub reference: usize,
}

pub fn expand_examples(albums: &[AlbumExample]) -> Vec<ExampleRef> {
    albums
        .iter()
        .enumerate()
        .flat_map(|(a, album)| (0..album.stories.len()).map(move |r| ExampleRef { album: a, reference: r }))
        .collect()
}

/// An example with the sentence derangement used for its ranking term.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub example: ExampleRef,
    pub derangement: Option<Vec<usize>>,
}

/// Example order and derangements of one epoch, fixed by `(seed, epoch)`.
pub fn epoch_plan(examples: &[ExampleRef], albums: &[AlbumExample], seed: u64, epoch: u64) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order = examples.to_vec();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|example| {
            let n = albums[example.album].stories[example.reference].len();
            let derangement = (n >= 2).then(|| random_derangement(n, &mut rng));
            BatchItem { example, derangement }
        })
        .collect()
}

/// Accumulates gradients of the summed batch objective and applies one Adam update.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    albums: &[AlbumExample],
    batch: &[BatchItem],
    weights: LossWeights,
) -> Result<LossReport> {
    store.zero_grads();
    let mut report = LossReport::default();
    for item in batch {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, store)?;
        let album = &albums[item.example.album];
        let loss = album_objective(
            &mut tape,
            &p,
            album,
            item.example.reference,
            item.derangement.as_deref(),
            weights,
            &FlagMode::Detect,
        )?;
        let r = loss.report(&tape);
        if !r.total.is_finite() {
            return Err(Error::Evaluation(r.total));
        }
        tape.backward_into(loss.total, store)?;
        report.merge(&r);
    }
    adam.step(store)?;
    Ok(report)
}

/// Loss of `items` without touching parameters.
pub fn evaluate_loss(model: &Model, store: &ParamStore, albums: &[AlbumExample], items: &[BatchItem], weights: LossWeights) -> Result<LossReport> {
    let mut report = LossReport::default();
    for item in items {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, store)?;
        let loss = album_objective(
            &mut tape,
            &p,
            &albums[item.example.album],
            item.example.reference,
            item.derangement.as_deref(),
            weights,
            &FlagMode::Detect,
        )?;
        report.merge(&loss.report(&tape));
    }
    Ok(report)
}

/// Greedy story as raw tokens, sentences concatenated, EOS dropped.
pub fn story_tokens(story: &[Vec<usize>], vocab: &Vocabulary) -> Vec<String> {
    story.iter().flat_map(|s| vocab.decode(s)).collect()
}

pub fn eval_pairs(model: &Model, store: &ParamStore, albums: &[AlbumExample], vocab: &Vocabulary) -> Result<Vec<EvalPair>> {
    albums
        .iter()
        .map(|album| {
            let story = generate_story(model, store, album, DecodeMode::Greedy)?;
            Ok(EvalPair {
                candidate: story_tokens(&story.sentences, vocab),
                references: album.reference_tokens.clone(),
            })
        })
        .collect()
}

/// Corpus CIDEr of greedy stories against all references.
pub fn validate(model: &Model, store: &ParamStore, albums: &[AlbumExample], vocab: &Vocabulary) -> Result<f64> {
    if albums.is_empty() {
        return Ok(0.0);
    }
    cider(&eval_pairs(model, store, albums, vocab)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// Score is at least the best so far; the best checkpoint moves here.
    pub is_best: bool,
    /// Score strictly improved; patience resets.
    pub improved: bool,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> Observation {
        let improved = self.best.is_none_or(|b| score > b);
        let is_best = self.best.is_none_or(|b| score >= b);
        if improved {
            self.best = Some(score);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            is_best,
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub stage: u8,
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Parameters at the best validation score.
    pub best: ParamStore,
    /// Parameters after the last completed step.
    pub last: ParamStore,
    pub best_cider: Option<f64>,
    /// Optimizer state matching `last`.
    pub optimizer: Adam,
    /// Global step count after this stage.
    pub steps: usize,
    pub entries: Vec<TrainLogEntry>,
    pub diverged: Option<Divergence>,
    pub stopped_early: bool,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub config: &'a TrainConfig,
    pub train: &'a [AlbumExample],
    pub val: &'a [AlbumExample],
    pub vocab: &'a Vocabulary,
}

impl<'a> Trainer<'a> {
    /// Encoder and decoder under `L_dec + λ·L_rank`; the reconstructor is frozen.
    pub fn run_stage1(&self, mut store: ParamStore, log: Option<&mut dyn Write>, start_step: usize) -> Result<StageOutcome> {
        store.unfreeze_all();
        store.freeze(RECONSTRUCTOR);
        let weights = LossWeights {
            lambda: self.config.lambda,
            mu: 0.0,
        };
        self.run(1, store, weights, self.config.max_steps, log, start_step)
    }

    /// Sentence decoder and reconstructor under the full objective; encoders and
    /// album summarization stay fixed.
    pub fn run_stage2(&self, mut store: ParamStore, log: Option<&mut dyn Write>, start_step: usize) -> Result<StageOutcome> {
        store.unfreeze_all();
        for g in STAGE2_FROZEN {
            store.freeze(g);
        }
        let weights = LossWeights {
            lambda: self.config.lambda,
            mu: self.config.mu,
        };
        self.run(2, store, weights, self.config.stage2_steps, log, start_step)
    }

    fn run(
        &self,
        stage: u8,
        store: ParamStore,
        weights: LossWeights,
        max_steps: usize,
        mut log: Option<&mut dyn Write>,
        start_step: usize,
    ) -> Result<StageOutcome> {
        self.config.validate()?;
        let examples = expand_examples(self.train);
        if examples.is_empty() && max_steps > 0 {
            return Err(Error::Empty("training set"));
        }
        let steps_per_epoch = examples.len().div_ceil(self.config.batch_size).max(1);
        let validate_every = if self.config.validate_every == 0 {
            steps_per_epoch
        } else {
            self.config.validate_every
        };
        let clock = Instant::now();
        let mut adam = Adam::new(self.config.adam());
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut outcome = StageOutcome {
            best: store.clone(),
            last: store,
            best_cider: None,
            optimizer: adam.clone(),
            steps: start_step,
            entries: Vec::new(),
            diverged: None,
            stopped_early: false,
        };
        let stream_base = u64::from(stage) << 32;
        let mut plan = Vec::new();
        let mut cursor = 0;

        for local in 1..=max_steps {
            let epoch = (local - 1) / steps_per_epoch;
            if (local - 1) % steps_per_epoch == 0 {
                plan = epoch_plan(&examples, self.train, self.config.seed, stream_base + epoch as u64);
                cursor = 0;
            }
            let end = (cursor + self.config.batch_size).min(plan.len());
            let batch = &plan[cursor..end];
            cursor = end;
            let step = start_step + local;

            let mut next = outcome.last.clone();
            let report = match train_step(self.model, &mut next, &mut adam, self.train, batch, weights) {
                Ok(r) => r,
                Err(Error::Evaluation(value)) => {
                    outcome.diverged = Some(Divergence { step, value });
                    break;
                }
                Err(Error::NonFiniteGradient(_)) => {
                    outcome.diverged = Some(Divergence { step, value: f64::NAN });
                    break;
                }
                Err(e) => return Err(e),
            };
            outcome.last = next;
            outcome.optimizer = adam.clone();
            outcome.steps = step;

            let mut val_cider = None;
            if local % validate_every == 0 || local == max_steps {
                let score = validate(self.model, &outcome.last, self.val, self.vocab)?;
                val_cider = Some(score);
                let obs = stopper.observe(score);
                if obs.is_best {
                    outcome.best = outcome.last.clone();
                    outcome.best_cider = Some(score);
                }
                if obs.stop {
                    outcome.stopped_early = true;
                }
            }
            let entry = TrainLogEntry {
                stage,
                step,
                report,
                val_cider,
                wall_ms: self.config.log_wall_time.then(|| clock.elapsed().as_millis() as u64),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            }
            outcome.entries.push(entry);
            if outcome.stopped_early {
                break;
            }
        }
        if outcome.best_cider.is_none() {
            outcome.best = outcome.last.clone();
        }
        Ok(outcome)
    }
}
