//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use storyforge::dataio::{build_vocab, random_derangement, synth_dataset, AlbumExample, LoadOptions, SynthSpec, Vocabulary};
use storyforge::diagnostics::{pipeline_grad_check, GradCheckProblem, GradCheckSetup};
use storyforge::gradcheck::tape_value_and_grads;
use storyforge::losses::{album_objective, LossWeights};
use storyforge::metrics::{bleu, cider, rouge_l, EvalPair};
use storyforge::model::decoder::encode_album;
use storyforge::model::{generate_story, names, DecodeMode, FlagMode, Model, ModelConfig};
use storyforge::params::{ParamStore, ATTENTION, PHOTO_ENCODER, SCENE_ENCODER};
use storyforge::tape::Tape;
use storyforge::tensor::NumArray;
use storyforge::trainer::{epoch_plan, evaluate_loss, expand_examples, StageOutcome, TrainConfig, Trainer};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn report(name: &str, verdict: Verdict, failures: &mut usize) {
    let tag = if verdict.pass { "PASS" } else { "FAIL" };
    if !verdict.pass {
        *failures += 1;
    }
    println!("{tag} {name}: {}", verdict.detail);
}

fn gradient_integrity() -> Verdict {
    let setup = GradCheckSetup::default();
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_elem = 0.0f64;
    let mut where_ = String::new();
    for seed in 0..20 {
        match pipeline_grad_check(&setup, seed, 1e-5) {
            Ok(r) => {
                if r.max_rel_error > worst {
                    worst = r.max_rel_error;
                    where_ = format!("seed {seed} {}", r.worst.unwrap_or_default());
                }
                worst_elem = worst_elem.max(r.max_elementwise_error);
            }
            Err(e) => return Verdict::new(false, format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-4 && secs < 60.0,
        format!(
            "20 seeds, max per-tensor relative error {worst:.2e} ({where_}), {secs:.1}s; \
             largest single-coordinate error {worst_elem:.2e} (informational)"
        ),
    )
}

fn straight_through() -> Verdict {
    let setup = GradCheckSetup::default();
    let det = [names::DET_V, names::DET_H, names::DET_B];
    let mut worst = 0.0f64;
    let mut largest_grad = 0.0f64;
    let mut fired = 0;
    for seed in 0..20 {
        let problem = match GradCheckProblem::new(&setup, 1000 + seed) {
            Ok(p) => p,
            Err(e) => return Verdict::new(false, e.to_string()),
        };
        let run = |mode: FlagMode| {
            tape_value_and_grads(&problem.params, &|tape: &mut Tape, store: &ParamStore| {
                let p = problem.model.bind(tape, store)?;
                let loss = album_objective(tape, &p, &problem.album, 0, Some(&problem.derangement), setup.weights, &mode)?;
                Ok(loss.total)
            })
        };
        let (Ok((v_hard, g_hard)), Ok((v_soft, g_soft))) = (run(FlagMode::Detect), run(FlagMode::Relaxed)) else {
            return Verdict::new(false, format!("seed {seed}: objective failed"));
        };
        if v_hard != v_soft {
            return Verdict::new(false, format!("seed {seed}: forward values differ"));
        }
        let mut tape = Tape::new();
        if let Ok(p) = problem.model.bind(&mut tape, &problem.params) {
            if let Ok(enc) = encode_album(&mut tape, &p, &problem.album, &FlagMode::Detect) {
                fired += enc.scenes.flags.iter().filter(|k| **k).count();
            }
        }
        for name in det {
            for (a, b) in g_hard[name].iter().zip(&g_soft[name]) {
                worst = worst.max((a - b).abs());
                largest_grad = largest_grad.max(a.abs());
            }
        }
    }
    Verdict::new(
        worst <= 1e-10 && largest_grad > 0.0,
        format!("20 albums ({fired} fired flags), max |Δgrad| on detector weights {worst:.1e}, max |grad| {largest_grad:.2e}"),
    )
}

fn scene_accounting() -> Verdict {
    let max_photos = 12;
    let model = Model::new(ModelConfig {
        feature_dim: 6,
        photo_hidden: 4,
        attn_hidden: 4,
        attn_proj: 4,
        embed_dim: 4,
        dec_hidden: 4,
        mlp_hidden: 4,
        vocab_size: 8,
        max_photos,
        max_words: 4,
        sentences: 2,
    })
    .expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut problems = Vec::new();
    let mut u_seen = [0usize; 2];
    for trial in 0..1000 {
        let mut params = model.init(&mut rng);
        params.get_mut(names::DET_B).expect("bias").data_mut()[0] = rng.random_range(-3.0..3.0);
        let m = rng.random_range(1..=max_photos);
        let album = AlbumExample {
            album_id: format!("a{trial}"),
            features: (0..m)
                .map(|_| NumArray::vector((0..6).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect(),
            stories: vec![],
            reference_tokens: vec![],
            gold_boundaries: None,
        };
        let mut modes = vec![FlagMode::Detect];
        if trial % 10 == 0 {
            modes.push(FlagMode::Fixed(vec![false; m]));
            modes.push(FlagMode::Fixed(vec![true; m]));
        }
        for mode in modes {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, &params).expect("bind");
            let enc = match encode_album(&mut tape, &p, &album, &mode) {
                Ok(e) => e,
                Err(e) => {
                    problems.push(format!("album {trial}: {e}"));
                    continue;
                }
            };
            let scene_mask = &enc.memory.mask[max_photos..];
            let u: usize = scene_mask.iter().filter(|k| **k).count();
            let expected = match &mode {
                FlagMode::Fixed(f) if f.iter().all(|k| !k) => 1,
                FlagMode::Fixed(_) => m,
                _ => 1 + enc.scenes.soft.iter().skip(1).filter(|s| **s > 0.5).count(),
            };
            if u != enc.scenes.u || u != expected || u < 1 || u > m {
                problems.push(format!("album {trial} {mode:?}: u={u}, expected {expected}, m={m}"));
            }
            if enc.memory.mask[..max_photos].iter().filter(|k| **k).count() != m {
                problems.push(format!("album {trial}: photo mask count"));
            }
            let cols = tape.value(enc.memory.columns);
            let width = model.config.repr_dim();
            for (row, valid) in enc.memory.mask.iter().enumerate() {
                if !valid && cols[row * width..(row + 1) * width].iter().any(|x| *x != 0.0) {
                    problems.push(format!("album {trial}: masked row {row} is not zero"));
                }
            }
            if matches!(mode, FlagMode::Detect) {
                u_seen[usize::from(u > 1)] += 1;
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "1000 albums: {} single-scene, {} multi-scene; forced all-0 and all-1 cases on 100 albums",
                u_seen[0], u_seen[1]
            )
        } else {
            format!("{} violations, first: {}", problems.len(), problems[0])
        },
    )
}

fn metric_goldens() -> Verdict {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let pair = |c: &str, r: &str| EvalPair::new(&toks(c), &[toks(r)]);
    let mut notes = Vec::new();

    // clipped count 1 of 3; BP = 1 because 3 > 2
    let b1 = bleu(&[pair("the the the", "the cat")], 1).expect("bleu")[0];
    let ok_b1 = (b1 - 1.0 / 3.0).abs() < 1e-12;
    notes.push(format!("BLEU-1 {b1:.6}"));

    let same = [pair("a dog runs on the beach", "a dog runs on the beach")];
    let all = bleu(&same, 4).expect("bleu");
    let ok_same = all.iter().all(|v| (v - 1.0).abs() < 1e-12);
    notes.push(format!("identical BLEU-1..4 {all:?}"));

    let (c, r) = (toks("a c d"), toks("a b c d"));
    let mut dp = vec![vec![0usize; r.len() + 1]; c.len() + 1];
    for i in 1..=c.len() {
        for j in 1..=r.len() {
            dp[i][j] = if c[i - 1] == r[j - 1] { dp[i - 1][j - 1] + 1 } else { dp[i - 1][j].max(dp[i][j - 1]) };
        }
    }
    let lcs = dp[c.len()][r.len()] as f64;
    let (prec, rec, beta2) = (lcs / c.len() as f64, lcs / r.len() as f64, 1.2f64 * 1.2);
    let oracle = (1.0 + beta2) * prec * rec / (rec + beta2 * prec);
    let rl = rouge_l(&[pair("a c d", "a b c d")]).expect("rouge");
    let ok_rl = (rl - oracle).abs() < 1e-9;
    notes.push(format!("ROUGE-L {rl:.9} vs oracle {oracle:.9}"));

    let ci = cider(&same).expect("cider");
    let ok_ci = (ci - 10.0).abs() < 1e-9;
    notes.push(format!("CIDEr {ci:.9}"));

    Verdict::new(ok_b1 && ok_same && ok_rl && ok_ci, notes.join("; "))
}

struct Overfit {
    model: Model,
    vocab: Vocabulary,
    albums: Vec<AlbumExample>,
    stage1: StageOutcome,
    seconds: f64,
}

fn overfit_setup() -> (Model, Vocabulary, Vec<AlbumExample>) {
    let spec = SynthSpec {
        clusters: 10,
        vocab_size: 60,
        ..SynthSpec::default()
    };
    let records = synth_dataset(&spec).expect("synthetic data");
    let vocab = build_vocab(records.iter().flat_map(|r| r.stories.iter().flatten().map(String::as_str)), 1).expect("vocab");
    let opts = LoadOptions {
        feature_dim: Some(spec.feature_dim),
        ..LoadOptions::default()
    };
    let albums = records
        .iter()
        .map(|r| AlbumExample::from_record(r, &vocab, &opts).expect("album"))
        .collect();
    let model = Model::new(ModelConfig {
        feature_dim: spec.feature_dim,
        photo_hidden: 16,
        attn_hidden: 32,
        attn_proj: 32,
        embed_dim: 16,
        dec_hidden: 32,
        mlp_hidden: 32,
        vocab_size: vocab.len(),
        max_photos: 40,
        max_words: 25,
        sentences: 5,
    })
    .expect("model");
    (model, vocab, albums)
}

fn train_config() -> TrainConfig {
    TrainConfig {
        max_steps: 2000,
        stage2_steps: 500,
        validate_every: 100,
        ..TrainConfig::default()
    }
}

fn run_overfit() -> Overfit {
    let (model, vocab, albums) = overfit_setup();
    let config = train_config();
    let trainer = Trainer {
        model: &model,
        config: &config,
        train: &albums,
        val: &albums,
        vocab: &vocab,
    };
    let start = Instant::now();
    let stage1 = trainer
        .run_stage1(model.init(&mut ChaCha8Rng::seed_from_u64(0)), None, 0)
        .expect("stage 1");
    let seconds = start.elapsed().as_secs_f64();
    Overfit {
        model,
        vocab,
        albums,
        stage1,
        seconds,
    }
}

fn overfit(o: &Overfit) -> Verdict {
    let nll = o.stage1.entries.last().map_or(f64::INFINITY, |e| e.report.per_word_nll());
    let best_nll = o.stage1.entries.iter().map(|e| e.report.per_word_nll()).fold(f64::INFINITY, f64::min);
    let mut exact = 0;
    for album in &o.albums {
        let story = generate_story(&o.model, &o.stage1.best, album, DecodeMode::Greedy).expect("generate");
        let reference = &album.stories[0];
        if story.sentences.len() == reference.len()
            && story.sentences.iter().zip(reference).all(|(g, r)| o.vocab.decode(g) == o.vocab.decode(r))
        {
            exact += 1;
        }
    }
    Verdict::new(
        best_nll < 0.1 && exact >= 7,
        format!(
            "8 albums, vocab {}, {} steps in {:.1}s: final per-word NLL {nll:.4} (min {best_nll:.4}), exact stories {exact}/8",
            o.vocab.len(),
            o.stage1.steps,
            o.seconds
        ),
    )
}

fn ranking(o: &Overfit) -> Verdict {
    let n = o.model.config.sentences;
    let perm = random_derangement(n, &mut ChaCha8Rng::seed_from_u64(2024));
    let mut margins = Vec::new();
    let mut rank_total = 0.0;
    for album in &o.albums {
        let mut tape = Tape::new();
        let p = o.model.bind(&mut tape, &o.stage1.best).expect("bind");
        let weights = LossWeights { lambda: 0.2, mu: 0.0 };
        let loss = album_objective(&mut tape, &p, album, 0, Some(&perm), weights, &FlagMode::Detect).expect("objective");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        margins.push(mean(&loss.sentence_log_probs) - mean(&loss.negative_log_probs));
        rank_total += loss.report(&tape).rank;
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Verdict::new(
        min > 0.0,
        format!("derangement {perm:?}: min mean log-prob margin {min:.3} over 8 albums, rank loss {rank_total:.2e}"),
    )
}

fn stage_two(o: &Overfit) -> Verdict {
    let config = train_config();
    let trainer = Trainer {
        model: &o.model,
        config: &config,
        train: &o.albums,
        val: &o.albums,
        vocab: &o.vocab,
    };
    let before = o.stage1.best.clone();
    let start = Instant::now();
    let stage2 = trainer.run_stage2(before.clone(), None, o.stage1.steps).expect("stage 2");
    let secs = start.elapsed().as_secs_f64();

    let mut changed = Vec::new();
    for group in [PHOTO_ENCODER, SCENE_ENCODER, ATTENTION] {
        for name in before.group_members(group) {
            let a = before.get(name).expect("param").data();
            for out in [&stage2.best, &stage2.last] {
                let b = out.get(name).expect("param").data();
                if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    changed.push(name.to_string());
                }
            }
            if stage2.optimizer.has_moments_for(name) {
                changed.push(format!("{name} (optimizer moments)"));
            }
        }
    }
    let items = epoch_plan(&expand_examples(&o.albums), &o.albums, 0, 0);
    let weights = LossWeights::default();
    let r0 = evaluate_loss(&o.model, &before, &o.albums, &items, weights).expect("loss").recon;
    let r1 = evaluate_loss(&o.model, &stage2.last, &o.albums, &items, weights).expect("loss").recon;
    let ratio = r1 / r0;
    Verdict::new(
        changed.is_empty() && ratio <= 0.5,
        format!(
            "{} steps in {secs:.1}s; frozen tensors changed: {}; recon {r0:.2} -> {r1:.2} ({:.1}%)",
            stage2.steps - o.stage1.steps,
            changed.len(),
            100.0 * ratio
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_storyforge"))
        .args(args)
        .current_dir(dir)
        .env_remove("STORYFORGE_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const CONFIG: &str = "train_data = \"data/train.jsonl\"
val_data = \"data/val.jsonl\"
vocab = \"data/vocab.txt\"
output_dir = \"out\"
min_count = 1
synth_albums = 8
synth_val_albums = 4
";

fn prepare(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("run.toml"), CONFIG).map_err(|e| e.to_string())?;
    cli(dir, &["synth-data", "--config", "run.toml"])?;
    cli(dir, &["build-vocab", "--config", "run.toml"])?;
    Ok(())
}

fn sweep_harness() -> Verdict {
    let run = || -> Result<Verdict, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        prepare(dir.path())?;
        let start = Instant::now();
        let stdout = cli(
            dir.path(),
            &["sweep", "--config", "run.toml", "--max-steps", "40", "--stage2-steps", "10", "--validate-every", "20"],
        )?;
        let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("sweep ")).collect();
        let mut expected: Vec<String> = ["0.0", "0.1", "0.2", "0.3", "0.4", "0.5"]
            .iter()
            .map(|l| format!("grid=lambda lambda={l} mu=0.0 "))
            .collect();
        expected.extend(
            ["0.0", "0.2", "0.4", "0.6", "0.8", "1.0"]
                .iter()
                .map(|m| format!("grid=mu lambda=0.2 mu={m} ")),
        );
        let metrics = ["BLEU-1=", "BLEU-2=", "BLEU-3=", "BLEU-4=", "ROUGE-L=", "CIDEr="];
        let ordered = lines.len() == expected.len()
            && lines
                .iter()
                .zip(&expected)
                .all(|(l, e)| l.contains(e.as_str()) && metrics.iter().all(|m| l.contains(m)));
        let tsv_rows = fs::read_to_string(dir.path().join("out/sweep.tsv"))
            .map_err(|e| e.to_string())?
            .lines()
            .count();
        Ok(Verdict::new(
            ordered && tsv_rows == 13,
            format!(
                "{} metric lines in grid order (6 λ cells with µ=0, 6 µ cells with λ=0.2), sweep.tsv rows {}, {:.1}s",
                lines.len(),
                tsv_rows - 1,
                start.elapsed().as_secs_f64()
            ),
        ))
    };
    run().unwrap_or_else(|e| Verdict::new(false, e))
}

fn determinism() -> Verdict {
    let run = || -> Result<Verdict, String> {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let args = [
            "train", "--config", "run.toml", "--stage", "all", "--seed", "11", "--max-steps", "60", "--stage2-steps", "20",
            "--validate-every", "10",
        ];
        for dir in [a.path(), b.path()] {
            prepare(dir)?;
            cli(dir, &args)?;
        }
        let read = |dir: &Path, f: &str| fs::read(dir.join("out").join(f)).map_err(|e| format!("{f}: {e}"));
        let body = |bytes: Vec<u8>| String::from_utf8_lossy(&bytes).lines().skip(1).map(str::to_string).collect::<Vec<_>>();
        let log_a = body(read(a.path(), "train_log.jsonl")?);
        let log_b = body(read(b.path(), "train_log.jsonl")?);
        let mut differing = Vec::new();
        if log_a != log_b {
            differing.push("train_log.jsonl".to_string());
        }
        let files = ["stage1.json", "stage2.json", "best.json", "last.json"];
        for f in files {
            if read(a.path(), f)? != read(b.path(), f)? {
                differing.push(f.to_string());
            }
        }
        Ok(Verdict::new(
            differing.is_empty() && log_a.len() == 80,
            format!(
                "{} log entries after the header; checkpoints compared: {}; differing: {}",
                log_a.len(),
                files.join(", "),
                if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
            ),
        ))
    };
    run().unwrap_or_else(|e| Verdict::new(false, e))
}

fn main() {
    let mut failures = 0;
    report("gradient integrity", gradient_integrity(), &mut failures);
    report("straight-through estimator", straight_through(), &mut failures);
    report("scene accounting", scene_accounting(), &mut failures);
    let o = run_overfit();
    report("overfit", overfit(&o), &mut failures);
    report("ranking effect", ranking(&o), &mut failures);
    report("stage-2 contract", stage_two(&o), &mut failures);
    report("metric golden values", metric_goldens(), &mut failures);
    report("trade-off sweep harness", sweep_harness(), &mut failures);
    report("determinism", determinism(), &mut failures);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
