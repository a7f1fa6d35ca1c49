//! The `storyforge` command line.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_grid, Overrides, RunConfig};
use crate::dataio::{build_vocab, load_albums, read_records, synth_dataset, write_records, AlbumExample, Vocabulary};
use crate::diagnostics::{pipeline_grad_check, GradCheckSetup};
use crate::error::Error;
use crate::gradcheck::{DEFAULT_DELTA, DEFAULT_THRESHOLD};
use crate::metrics::{EvalPair, MetricSummary};
use crate::model::{decoder::encode_album, generate_story, DecodeMode, FlagMode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::trainer::{eval_pairs, Divergence, Stage, StageOutcome, Trainer};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "storyforge", version, about = "Album storytelling with a hierarchical photo-scene encoder")]
pub struct Cli {
    /// TOML config file; defaults to $STORYFORGE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic album set with known scene boundaries.
    SynthData(Overrides),
    /// Build the vocabulary from the training stories.
    BuildVocab(Overrides),
    /// Train stage 1, stage 2 or both.
    Train(Overrides),
    /// Decode stories for the evaluation albums.
    Generate(Overrides),
    /// Print per-photo boundary scores, flags and scene indices.
    InspectScenes(Overrides),
    /// Score generated stories against the references.
    Evaluate(Overrides),
    /// Finite-difference check of the full training objective.
    GradCheck(Overrides),
    /// Train and score every cell of the λ and µ grids.
    Sweep(Overrides),
}

impl Command {
    fn parts(&self) -> (&'static str, &Overrides) {
        match self {
            Command::SynthData(o) => ("synth-data", o),
            Command::BuildVocab(o) => ("build-vocab", o),
            Command::Train(o) => ("train", o),
            Command::Generate(o) => ("generate", o),
            Command::InspectScenes(o) => ("inspect-scenes", o),
            Command::Evaluate(o) => ("evaluate", o),
            Command::GradCheck(o) => ("grad-check", o),
            Command::Sweep(o) => ("sweep", o),
        }
    }
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let (name, overrides) = cli.command.parts();
    let config = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    config
        .write_resolved(name)
        .with_context(|| format!("writing resolved config to {}", config.output_dir.display()))?;
    match &cli.command {
        Command::SynthData(_) => synth_data(&config, out),
        Command::BuildVocab(_) => build_vocab_cmd(&config, out),
        Command::Train(_) => train(&config, out),
        Command::Generate(_) => generate(&config, out),
        Command::InspectScenes(_) => inspect_scenes(&config, out),
        Command::Evaluate(_) => evaluate(&config, out),
        Command::GradCheck(_) => grad_check(&config, out),
        Command::Sweep(_) => sweep(&config, out),
    }
}

fn synth_data(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let total = config.synth_albums + config.synth_val_albums;
    let mut records = synth_dataset(&config.synth_spec(total, config.seed))?;
    let val = records.split_off(config.synth_albums);
    write_records(&config.train_data, &records)?;
    writeln!(out, "wrote {} albums to {}", records.len(), config.train_data.display()).map_err(anyhow::Error::from)?;
    if !val.is_empty() {
        if config.val_data.as_os_str().is_empty() {
            return Err(Failure::Usage(anyhow!("synth_val_albums needs val_data")));
        }
        write_records(&config.val_data, &val)?;
        writeln!(out, "wrote {} albums to {}", val.len(), config.val_data.display()).map_err(anyhow::Error::from)?;
    }
    Ok(())
}

fn build_vocab_cmd(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let records = read_records(&config.train_data).with_context(|| format!("reading {}", config.train_data.display()))?;
    let vocab = build_vocab(
        records.iter().flat_map(|r| r.stories.iter().flatten().map(String::as_str)),
        config.min_count,
    )?;
    vocab.save(&config.vocab)?;
    writeln!(out, "vocabulary of {} tokens written to {}", vocab.len(), config.vocab.display()).map_err(anyhow::Error::from)?;
    Ok(())
}

fn load_vocab(config: &RunConfig) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(&config.vocab).with_context(|| format!("reading vocabulary {}", config.vocab.display()))
}

fn load(path: &Path, vocab: &Vocabulary, config: &RunConfig, feature_dim: Option<usize>) -> anyhow::Result<Vec<AlbumExample>> {
    let mut opts = config.load_options();
    if feature_dim.is_some() {
        opts.feature_dim = feature_dim;
    }
    let albums = load_albums(path, vocab, &opts).with_context(|| format!("reading albums {}", path.display()))?;
    Ok(albums)
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
    run: RunConfig,
}

fn save_checkpoint(path: &Path, store: &ParamStore, model: &Model, config: &RunConfig, outcome: Option<&StageOutcome>) -> anyhow::Result<()> {
    let snapshot = serde_json::to_value(CheckpointConfig {
        model: model.config,
        run: config.clone(),
    })?;
    let optimizer = outcome.map(|o| o.optimizer.state());
    store
        .save(path, snapshot, optimizer.as_ref())
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

fn load_model(config: &RunConfig) -> anyhow::Result<(Model, ParamStore)> {
    let path = config.checkpoint_path();
    let ckpt = ParamStore::load(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let snapshot: CheckpointConfig =
        serde_json::from_value(ckpt.config).with_context(|| format!("checkpoint {} lacks a model config", path.display()))?;
    Ok((Model::new(snapshot.model)?, ckpt.params))
}

fn log_header(log: &mut dyn Write, config: &RunConfig) -> anyhow::Result<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let header = serde_json::json!({
        "log": "storyforge-train",
        "started_unix": started,
        "stage": config.stage.to_string(),
        "seed": config.seed,
    });
    writeln!(log, "{header}")?;
    Ok(())
}

fn train(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let vocab = load_vocab(config)?;
    let train_set = load(&config.train_data, &vocab, config, None)?;
    let feature_dim = train_set
        .first()
        .map(|a| a.features[0].len())
        .or((config.feature_dim > 0).then_some(config.feature_dim))
        .ok_or_else(|| Failure::Usage(anyhow!("training file has no albums and feature_dim is unset")))?;
    let val_set = load(config.val_path(), &vocab, config, Some(feature_dim))?;
    let (model, init) = if config.stage == Stage::Two {
        let (model, store) = load_model(config)?;
        if model.config.feature_dim != feature_dim || model.config.vocab_size != vocab.len() {
            return Err(Failure::Usage(anyhow!("checkpoint does not match the data or vocabulary")));
        }
        (model, store)
    } else {
        let model = Model::new(config.model_config(feature_dim, vocab.len()))?;
        let store = model.init(&mut ChaCha8Rng::seed_from_u64(config.seed));
        (model, store)
    };

    fs::create_dir_all(&config.output_dir).map_err(anyhow::Error::from)?;
    let log_path = config.output_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(anyhow::Error::from)?);
    log_header(&mut log, config)?;

    let train_config = config.train_config();
    let trainer = Trainer {
        model: &model,
        config: &train_config,
        train: &train_set,
        val: &val_set,
        vocab: &vocab,
    };
    let mut store = init;
    let mut steps = 0;
    let mut diverged: Option<Divergence> = None;
    let mut last: Option<StageOutcome> = None;
    if matches!(config.stage, Stage::One | Stage::All) {
        let s1 = trainer.run_stage1(store, Some(&mut log), steps)?;
        save_checkpoint(&config.output_dir.join("stage1.json"), &s1.best, &model, config, None)?;
        writeln!(out, "stage 1: {} steps, best validation CIDEr {}", s1.steps, fmt_opt(s1.best_cider)).map_err(anyhow::Error::from)?;
        steps = s1.steps;
        diverged = s1.diverged;
        store = s1.best.clone();
        last = Some(s1);
    }
    if diverged.is_none() && matches!(config.stage, Stage::Two | Stage::All) {
        let s2 = trainer.run_stage2(store, Some(&mut log), steps)?;
        save_checkpoint(&config.output_dir.join("stage2.json"), &s2.best, &model, config, None)?;
        writeln!(out, "stage 2: {} steps, best validation CIDEr {}", s2.steps, fmt_opt(s2.best_cider)).map_err(anyhow::Error::from)?;
        diverged = s2.diverged;
        store = s2.best.clone();
        last = Some(s2);
    }
    log.flush().map_err(anyhow::Error::from)?;
    if let Some(outcome) = &last {
        save_checkpoint(&config.output_dir.join("last.json"), &outcome.last, &model, config, Some(outcome))?;
    }
    let best = config.output_dir.join("best.json");
    save_checkpoint(&best, &store, &model, config, None)?;
    writeln!(out, "checkpoint written to {}", best.display()).map_err(anyhow::Error::from)?;
    if let Some(d) = diverged {
        return Err(Failure::Runtime(anyhow::Error::from(Error::Diverged {
            step: d.step as u64,
            value: d.value,
        })));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn decode_mode(config: &RunConfig) -> DecodeMode {
    if config.beam_width <= 1 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam(config.beam_width)
    }
}

/// One line of `stories.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub album_id: String,
    pub sentences: Vec<String>,
    pub flags: Vec<u8>,
    pub alpha: Vec<Vec<f64>>,
}

fn generate(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let (model, store) = load_model(config)?;
    let vocab = load_vocab(config)?;
    let albums = load(config.eval_path(), &vocab, config, Some(model.config.feature_dim))?;
    let path = config.output_dir.join("stories.jsonl");
    let mut file = BufWriter::new(fs::File::create(&path).map_err(anyhow::Error::from)?);
    for album in &albums {
        let story = generate_story(&model, &store, album, decode_mode(config))?;
        let record = StoryRecord {
            album_id: album.album_id.clone(),
            sentences: story.sentences.iter().map(|s| vocab.decode(s).join(" ")).collect(),
            flags: story.flags.iter().map(|&k| u8::from(k)).collect(),
            alpha: story.alphas,
        };
        writeln!(file, "{}", serde_json::to_string(&record).map_err(anyhow::Error::from)?).map_err(anyhow::Error::from)?;
    }
    file.flush().map_err(anyhow::Error::from)?;
    writeln!(out, "wrote {} stories to {}", albums.len(), path.display()).map_err(anyhow::Error::from)?;
    Ok(())
}

fn inspect_scenes(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let (model, store) = load_model(config)?;
    let vocab = load_vocab(config)?;
    let albums = load(config.eval_path(), &vocab, config, Some(model.config.feature_dim))?;
    writeln!(out, "album_id\tphoto\tsoft\tflag\tscene").map_err(anyhow::Error::from)?;
    for album in &albums {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, &store)?;
        let enc = encode_album(&mut tape, &p, album, &FlagMode::Detect)?;
        let scenes = enc.scenes.scene_index();
        for (i, ((soft, flag), scene)) in enc.scenes.soft.iter().zip(&enc.scenes.flags).zip(scenes).enumerate() {
            writeln!(out, "{}\t{}\t{:.6}\t{}\t{}", album.album_id, i, soft, u8::from(*flag), scene).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn read_stories(path: &Path) -> anyhow::Result<Vec<StoryRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading stories {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn write_metrics(out: &mut dyn Write, summary: &MetricSummary) -> anyhow::Result<()> {
    for (name, value) in summary.rows() {
        writeln!(out, "{name} {value:.4} {}", summary.corpus_size)?;
    }
    Ok(())
}

fn evaluate(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let pairs = match config.stories_path() {
        Some(path) => {
            let records = read_records(config.eval_path()).with_context(|| format!("reading {}", config.eval_path().display()))?;
            let stories = read_stories(path)?;
            let mut pairs = Vec::with_capacity(stories.len());
            for s in stories {
                let album = records
                    .iter()
                    .find(|r| r.album_id == s.album_id)
                    .ok_or_else(|| anyhow!("no references for album `{}`", s.album_id))?;
                let tok = |text: &[String]| text.iter().flat_map(|t| crate::dataio::tokenize(t)).collect::<Vec<_>>();
                pairs.push(EvalPair {
                    candidate: tok(&s.sentences),
                    references: album.stories.iter().map(|r| tok(r)).collect(),
                });
            }
            pairs
        }
        None => {
            let (model, store) = load_model(config)?;
            let vocab = load_vocab(config)?;
            let albums = load(config.eval_path(), &vocab, config, Some(model.config.feature_dim))?;
            eval_pairs(&model, &store, &albums, &vocab)?
        }
    };
    let summary = MetricSummary::compute(&pairs)?;
    write_metrics(out, &summary)?;
    Ok(())
}

fn grad_check(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let setup = GradCheckSetup::default();
    let mut worst: f64 = 0.0;
    for i in 0..config.grad_check_seeds {
        let seed = config.seed + i;
        let report = pipeline_grad_check(&setup, seed, DEFAULT_DELTA)?;
        writeln!(
            out,
            "seed {seed} max_rel_error {:.3e} worst {} coordinates {} max_elementwise_error {:.3e}",
            report.max_rel_error,
            report.worst.as_deref().unwrap_or("-"),
            report.checked,
            report.max_elementwise_error
        )
        .map_err(anyhow::Error::from)?;
        worst = worst.max(report.max_rel_error);
    }
    let verdict = if worst < DEFAULT_THRESHOLD { "PASS" } else { "FAIL" };
    writeln!(out, "{verdict} max_rel_error {worst:.3e} threshold {DEFAULT_THRESHOLD:e}").map_err(anyhow::Error::from)?;
    if worst >= DEFAULT_THRESHOLD {
        return Err(Failure::Runtime(anyhow!("gradient check failed: {worst:.3e} ≥ {DEFAULT_THRESHOLD:e}")));
    }
    Ok(())
}

fn sweep(config: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let lambdas = parse_grid(&config.sweep_lambdas)?;
    let mus = parse_grid(&config.sweep_mus)?;
    if lambdas.is_empty() && mus.is_empty() {
        bail_usage("sweep grids are empty")?;
    }
    let vocab = load_vocab(config)?;
    let train_set = load(&config.train_data, &vocab, config, None)?;
    let feature_dim = train_set
        .first()
        .map(|a| a.features[0].len())
        .ok_or_else(|| Failure::Usage(anyhow!("training file has no albums")))?;
    let val_set = load(config.val_path(), &vocab, config, Some(feature_dim))?;
    let model = Model::new(config.model_config(feature_dim, vocab.len()))?;
    let cells = lambdas
        .iter()
        .map(|&l| ("lambda", l, 0.0))
        .chain(mus.iter().map(|&m| ("mu", crate::losses::DEFAULT_LAMBDA, m)));
    let tsv_path = config.output_dir.join("sweep.tsv");
    let mut tsv = BufWriter::new(fs::File::create(&tsv_path).map_err(anyhow::Error::from)?);
    writeln!(tsv, "grid\tlambda\tmu\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tROUGE-L\tCIDEr").map_err(anyhow::Error::from)?;
    for (grid, lambda, mu) in cells {
        let mut cell = config.clone();
        cell.lambda = lambda;
        cell.mu = mu;
        let train_config = cell.train_config();
        let trainer = Trainer {
            model: &model,
            config: &train_config,
            train: &train_set,
            val: &val_set,
            vocab: &vocab,
        };
        let init = model.init(&mut ChaCha8Rng::seed_from_u64(cell.seed));
        let s1 = trainer.run_stage1(init, None, 0)?;
        let s2 = trainer.run_stage2(s1.best, None, s1.steps)?;
        let summary = MetricSummary::compute(&eval_pairs(&model, &s2.best, &val_set, &vocab)?)?;
        let values: Vec<String> = summary.rows().iter().map(|(_, v)| format!("{v:.4}")).collect();
        let named: Vec<String> = summary.rows().iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
        writeln!(out, "sweep grid={grid} lambda={lambda:?} mu={mu:?} {}", named.join(" ")).map_err(anyhow::Error::from)?;
        writeln!(tsv, "{grid}\t{lambda:?}\t{mu:?}\t{}", values.join("\t")).map_err(anyhow::Error::from)?;
    }
    tsv.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn bail_usage(message: &str) -> CmdResult {
    Err(Failure::Usage(anyhow!(message.to_string())))
}
