//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ear_tsm::checkpoint::Checkpoint;
use ear_tsm::config::RunConfig;
use ear_tsm::ingest::{self, EarCategory, LabelMapping, ManifestEntry, SourceDataset};
use ear_tsm::net::build_model;
use ear_tsm::rng;
use ear_tsm::sampler::{sample_indices, SampleSpec};
use ear_tsm::scorer::{
    parse_leaderboard, rank_leaderboard, render_leaderboard, score, split_score, GroundTruth,
    SplitAssignment, SubmissionRow, CHALLENGE_LEADERBOARD,
};
use ear_tsm::shift::{temporal_shift, temporal_shift_adjoint, ShiftConfig};
use ear_tsm::synthetic::{self, SynthSpec};
use ear_tsm::trainer::{clip_global_norm, evaluate, lr_at_epoch, TrainConfig, Trainer};
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure!(t < limit, "{what} took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64());
    Ok(t)
}

fn shift_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng::substream(1, "acceptance-shapes", &[]);
    for case in 0..200 {
        let dims = [
            r.random_range(1..=2),
            r.random_range(1..=16),
            r.random_range(1..=64),
            r.random_range(1..=3),
            r.random_range(1..=3),
        ];
        let div = *[1usize, 2, 4, 8].choose(&mut r).unwrap();
        let x = common::random_tensor(dims.to_vec(), case);
        let got = temporal_shift(&x, div).map_err(|e| e.to_string())?;
        ensure!(
            got.data() == &common::brute_force_shift(x.data(), dims, div)[..],
            "shape {dims:?} div {div} differs from the gather oracle"
        );
    }
    let t = within(start, Duration::from_secs(10), "200 shapes")?;
    Ok(format!("200 shapes exact in {:.2}s", t.as_secs_f64()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let dims = vec![2, 6, 24, 2, 2];
    let x = common::random_tensor(dims.clone(), 3);
    let g = common::random_tensor(dims, 4);
    let analytic = temporal_shift_adjoint(&g, 8).map_err(|e| e.to_string())?;
    let loss = |x: &ear_tsm::tensor::Tensor| -> f64 {
        temporal_shift(x, 8).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst_shift: f64 = 0.0;
    let mut r = rng::substream(5, "acceptance-shift-fd", &[]);
    for _ in 0..40 {
        let i = r.random_range(0..x.len());
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[i] += 1e-3;
        down.data_mut()[i] -= 1e-3;
        let numeric = (loss(&up) - loss(&down)) / 2e-3;
        let a = analytic.data()[i];
        worst_shift = worst_shift.max((numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    ensure!(worst_shift < 1e-3, "shift adjoint relative error {worst_shift:e}");

    let mut model = common::tiny_model(&common::tiny_shift(4), 0.0, 5);
    let clip = common::random_clip([2, 4, 3, 12, 12], 6);
    let check = common::gradient_check(&mut model, &clip, &[1, 4], 1e-3, 30);
    ensure!(check.samples.len() >= 10, "only {} kink-free parameters sampled", check.samples.len());
    let worst = check.samples.iter().map(|s| s.relative_error()).fold(0.0, f64::max);
    ensure!(worst < 1e-3, "network gradient relative error {worst:e}");
    let t = within(start, Duration::from_secs(60), "gradient checks")?;
    Ok(format!(
        "shift max rel {worst_shift:.1e}; network {} params max rel {worst:.1e} ({} kink draws skipped) in {:.2}s",
        check.samples.len(),
        check.kinked,
        t.as_secs_f64()
    ))
}

fn permutations() -> Outcome {
    let mut invariant_worst: f64 = 0.0;
    let mut changed = 0;
    for seed in 0..50 {
        invariant_worst = invariant_worst.max(common::permutation_effect(&ShiftConfig::disabled(8), seed));
        if common::permutation_effect(&common::tiny_shift(8), seed) > 1e-6 {
            changed += 1;
        }
    }
    ensure!(invariant_worst < 1e-9, "shift disabled but a permutation moved logits by {invariant_worst:e}");
    ensure!(changed * 100 >= 95 * 50, "only {changed}/50 seeds are order sensitive");
    Ok(format!("disabled max diff {invariant_worst:.1e}; enabled sensitive for {changed}/50 seeds"))
}

fn sampler() -> Outcome {
    let start = Instant::now();
    let eval = SampleSpec::eval(8);
    let idx = |l| sample_indices(l, &eval).map_err(|e| e.to_string());
    ensure!(idx(8)? == (0..8).collect::<Vec<_>>(), "L=8 gave {:?}", idx(8)?);
    ensure!(idx(16)? == vec![1, 3, 5, 7, 9, 11, 13, 15], "L=16 gave {:?}", idx(16)?);
    ensure!(idx(3)? == vec![0, 0, 0, 1, 1, 1, 2, 2], "L=3 gave {:?}", idx(3)?);
    let mut r = rng::substream(2, "acceptance-lengths", &[]);
    for i in 0..1000u64 {
        let l = r.random_range(1..=10_000);
        for spec in [SampleSpec::eval(8), SampleSpec::train(8, i)] {
            let v = sample_indices(l, &spec).map_err(|e| e.to_string())?;
            ensure!(v.len() == 8, "L={l}: {} indices", v.len());
            ensure!(v.iter().all(|&x| x < l), "L={l}: out of range {v:?}");
            ensure!(v.windows(2).all(|w| w[0] <= w[1]), "L={l}: not monotone {v:?}");
        }
        ensure!(idx(l)? == common::centre_oracle(l, 8), "L={l}: centre differs from oracle");
    }
    let t = within(start, Duration::from_secs(5), "sampler checks")?;
    Ok(format!("fixtures and 1000 random lengths in {:.3}s", t.as_secs_f64()))
}

fn recipe() -> Outcome {
    let golden = include_str!("fixtures/paper_config.toml");
    let mut cfg = RunConfig::paper();
    cfg.paths.output_dir = ear_tsm::config::DEFAULT_OUTPUT_DIR.into();
    let dump = cfg.to_toml();
    ensure!(dump == golden, "paper dump differs from golden:\n{}", ear_tsm::config::spec_diff("golden", golden, "dump", &dump));
    for line in [
        "learning_rate = 0.001",
        "lr_decay_epochs = [20, 40]",
        "weight_decay = 0.0001",
        "grad_clip_norm = 20.0",
        "epochs = 100",
        "batch_size = 4",
        "dropout_rate = 0.5",
        "segments = 8",
        "shift_div = 8",
        "crop_mode = \"center\"",
        "eval_mode = \"eval_center\"",
    ] {
        ensure!(dump.lines().any(|l| l == line), "missing `{line}`");
    }
    Ok("paper profile matches golden config".into())
}

fn clip_and_schedule() -> Outcome {
    let mut r = rng::substream(3, "acceptance-clip", &[]);
    let mut clipped = 0;
    for i in 0..500u64 {
        let scale = 10f64.powf(r.random_range(-2.0..4.0));
        let mut grads: Vec<Vec<f64>> = (0..4)
            .map(|k| common::random_values(r.random_range(1..64), i * 4 + k).iter().map(|v| v * scale).collect())
            .collect();
        let (before, after) = clip_global_norm(&mut grads, 20.0);
        ensure!(after <= 20.0 * (1.0 + 1e-12), "post-clip norm {after} from {before}");
        clipped += (before > 20.0) as usize;
    }
    let cfg = TrainConfig::paper();
    let lr = |e| lr_at_epoch(&cfg, e).map_err(|e| e.to_string());
    for (e, want) in [(0, 1e-3), (19, 1e-3), (20, 1e-4), (39, 1e-4), (40, 1e-5), (99, 1e-5)] {
        let got = lr(e)?;
        ensure!((got - want).abs() <= 1e-15 * want, "lr at epoch {e} is {got}, want {want}");
    }
    Ok(format!("500 gradient sets ({clipped} clipped) stay within 20; staircase 1e-3/1e-4/1e-5"))
}

struct DeskRun {
    metrics: String,
    max_train_acc: f64,
    val_acc: f64,
    test_acc: f64,
    best: std::path::PathBuf,
}

fn desk_run(root: &Path, run: &str, test: &[ManifestEntry]) -> Result<DeskRun, String> {
    let cfg = RunConfig::desk();
    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING).map_err(|e| e.to_string())?;
    let manifest = ingest::build_manifest(&[(root.join("train"), SourceDataset::Synthetic)], &mapping, &[])
        .map_err(|e| e.to_string())?
        .entries;
    ensure!(manifest.len() == 48, "{} synthetic videos", manifest.len());
    let split = ingest::split_manifest(&manifest, cfg.train.val_fraction, cfg.train.seed).map_err(|e| e.to_string())?;
    let mut model = build_model(&cfg.backbone, &cfg.head, &cfg.shift, cfg.train.seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.clip_source()).map_err(|e| e.to_string())?;
    let out = root.join(run);
    let state = trainer
        .fit(&mut model, &split.train, &split.validation, &out, false)
        .map_err(|e| e.to_string())?;
    ensure!(state.history.len() <= 30, "{} epochs", state.history.len());
    let best = state.best_checkpoint_path.clone().ok_or("no best checkpoint")?;
    let ck = Checkpoint::load(&best).map_err(|e| e.to_string())?;
    model.load_state(&ck.model_state()).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        metrics: fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?,
        max_train_acc: state.history.iter().map(|h| h.3).fold(0.0, f64::max),
        val_acc: state.best_val_accuracy,
        test_acc: evaluate(&model, test, &cfg.crop).map_err(|e| e.to_string())?,
        best,
    })
}

fn overfit(root: &Path) -> Result<(String, std::path::PathBuf, std::path::PathBuf), String> {
    let start = Instant::now();
    synthetic::generate(&root.join("train"), &SynthSpec::default()).map_err(|e| e.to_string())?;
    let test_spec = SynthSpec {
        subject: "S02".into(),
        seed: 1,
        ..SynthSpec::default()
    };
    synthetic::generate(&root.join("test"), &test_spec).map_err(|e| e.to_string())?;
    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING).map_err(|e| e.to_string())?;
    let test = ingest::build_manifest(&[(root.join("test"), SourceDataset::Synthetic)], &mapping, &[])
        .map_err(|e| e.to_string())?
        .entries;
    let test_manifest = root.join("test.csv");
    ingest::write_manifest(&test_manifest, &test).map_err(|e| e.to_string())?;

    let a = desk_run(root, "run_a", &test)?;
    let b = desk_run(root, "run_b", &test)?;
    let t = within(start, Duration::from_secs(600), "two desk runs")?;
    ensure!(a.metrics == b.metrics, "metrics.csv differs between identically seeded runs");
    ensure!(a.max_train_acc >= 0.95, "train accuracy {:.3}", a.max_train_acc);
    ensure!(a.val_acc >= 0.90, "validation accuracy {:.3}", a.val_acc);
    ensure!(a.test_acc >= 0.90, "test accuracy {:.3}", a.test_acc);
    Ok((
        format!(
            "train {:.3}, validation {:.3}, fresh test {:.3}; two runs identical in {:.1}s",
            a.max_train_acc,
            a.val_acc,
            a.test_acc,
            t.as_secs_f64()
        ),
        a.best,
        test_manifest,
    ))
}

fn truth_and_rows(n: usize, correct: usize, seed: u64) -> (Vec<SubmissionRow>, GroundTruth) {
    let mut r = rng::substream(seed, "acceptance-scores", &[]);
    let mut truth = GroundTruth::new();
    let mut rows = Vec::new();
    for i in 0..n {
        let label = EarCategory::from_index(r.random_range(0..6)).unwrap();
        let predicted = if i < correct {
            label
        } else {
            EarCategory::from_index((label.index() + 1 + r.random_range(0..5)) % 6).unwrap()
        };
        truth.insert(format!("vid{i:04}"), label);
        rows.push(SubmissionRow {
            video_id: format!("vid{i:04}"),
            predicted,
        });
    }
    (rows, truth)
}

fn scoring() -> Outcome {
    let value = |n, c| -> Result<f64, String> {
        let (rows, truth) = truth_and_rows(n, c, 0);
        Ok(score(&rows, &truth).map_err(|e| e.to_string())?.value())
    };
    ensure!(value(4, 4)? == 1.0, "all correct scored {}", value(4, 4)?);
    ensure!(value(4, 3)? == 0.75, "3 of 4 scored {}", value(4, 3)?);
    ensure!(value(2308, 1880)? == 1880.0 / 2308.0, "1880/2308 scored {}", value(2308, 1880)?);

    let mut r = rng::substream(4, "acceptance-decomposition", &[]);
    let correct = r.random_range(0..=1000);
    let (rows, truth) = truth_and_rows(1000, correct, 7);
    let assignment = SplitAssignment::new(truth.keys().map(String::as_str), 11);
    let (p, q) = split_score(&rows, &truth, &assignment).map_err(|e| e.to_string())?;
    let overall = score(&rows, &truth).map_err(|e| e.to_string())?.value();
    let weighted = (p.value() * p.total as f64 + q.value() * q.total as f64) / 1000.0;
    ensure!((weighted - overall).abs() < 1e-12, "weighted {weighted} vs overall {overall}");

    let ranked = rank_leaderboard(&parse_leaderboard(CHALLENGE_LEADERBOARD).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(ranked[0].name == "our best", "first is {}", ranked[0].name);
    ensure!((ranked[0].public, ranked[0].private) == (0.84272, 0.85051), "our best scores changed");
    ensure!(ranked[2].name == "CUHK", "third is {}", ranked[2].name);
    let text = render_leaderboard(&ranked).map_err(|e| e.to_string())?;
    ensure!(text.contains("0.84272") && text.contains("0.85051"), "rendered table lacks scores");
    Ok(format!(
        "1.0, 0.75, 1880/2308 exact; split identity |diff| {:.1e}; table ranks our best first, CUHK third",
        (weighted - overall).abs()
    ))
}

fn byte_determinism(ckpt: &Path, manifest: &Path, dir: &Path) -> Outcome {
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.join(name);
        let code = ear_tsm::cli::run_from([
            "ear",
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure!(code == 0, "infer exited with {code}");
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "submissions differ");
    Ok(format!("two submissions of {} bytes identical", outputs[0].len()))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 shift oracle equivalence", guarded(shift_oracle)),
        ("2 shift adjoint and gradients", guarded(gradients)),
        ("3 permutation dichotomy", guarded(permutations)),
        ("4 sampler conformance", guarded(sampler)),
        ("5 recipe fidelity", guarded(recipe)),
        ("6 clipping and schedule", guarded(clip_and_schedule)),
    ];
    let e2e = guarded(|| overfit(&dir.path().join("desk")));
    let artefacts = e2e.as_ref().ok().map(|(_, c, m)| (c.clone(), m.clone()));
    results.push(("7 end-to-end overfit", e2e.map(|(msg, _, _)| msg)));
    results.push(("8 scoring exactness", guarded(scoring)));
    let infer = match artefacts {
        Some((ckpt, manifest)) => guarded(|| byte_determinism(&ckpt, &manifest, dir.path())),
        None => Err("no checkpoint from criterion 7".into()),
    };
    results.push(("9 byte determinism", infer));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
