//! Train the desk profile on a freshly generated synthetic dataset and report
//! held-out accuracy on a second, disjoint synthetic set.
//!
//! cargo run --release --example train_desk -- [OUT_DIR]

use std::path::PathBuf;
use std::time::Instant;

use ear_tsm::checkpoint::Checkpoint;
use ear_tsm::config::RunConfig;
use ear_tsm::ingest::{self, LabelMapping, SourceDataset};
use ear_tsm::net::build_model;
use ear_tsm::synthetic::{self, SynthSpec};
use ear_tsm::trainer::{evaluate, Trainer};

fn main() -> ear_tsm::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ear_desk"), PathBuf::from);
    let overrides: Vec<String> = std::env::args().skip(2).collect();
    let cfg = RunConfig::desk().with_overrides(&overrides)?;
    cfg.validate()?;
    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING)?;

    let train_root = out.join("data/train");
    let test_root = out.join("data/test");
    synthetic::generate(&train_root, &SynthSpec::default())?;
    synthetic::generate(
        &test_root,
        &SynthSpec {
            subject: "S02".into(),
            seed: 1,
            ..SynthSpec::default()
        },
    )?;
    let manifest = ingest::build_manifest(&[(train_root, SourceDataset::Synthetic)], &mapping, &[])?;
    let test = ingest::build_manifest(&[(test_root, SourceDataset::Synthetic)], &mapping, &[])?;
    let split = ingest::split_manifest(&manifest.entries, cfg.train.val_fraction, cfg.train.seed)?;
    println!(
        "{} training, {} validation, {} test videos",
        split.train.len(),
        split.validation.len(),
        test.entries.len()
    );

    let start = Instant::now();
    let mut model = build_model(&cfg.backbone, &cfg.head, &cfg.shift, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.clip_source())?;
    let run = out.join("run");
    let state = trainer.fit(&mut model, &split.train, &split.validation, &run, false)?;
    for (epoch, lr, loss, acc, val) in &state.history {
        println!("epoch {epoch:>2}  lr {lr:.5}  loss {loss:.4}  train {acc:.3}  val {val:.3}");
    }
    let best = Checkpoint::load(state.best_checkpoint_path.as_ref().expect("trained"))?;
    model.load_state(&best.model_state())?;
    let test_acc = evaluate(&model, &test.entries, &cfg.crop)?;
    println!(
        "best val {:.3} at epoch {:?}; test {:.3}; {:.1}s",
        state.best_val_accuracy,
        state.best_epoch,
        test_acc,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
