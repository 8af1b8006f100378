//! Train briefly on synthetic data, write a submission for a held-out set and
//! score it overall and on the public/private halves.
//!
//! cargo run --release --example infer_and_score -- [OUT_DIR]

use std::path::PathBuf;

use ear_tsm::checkpoint::Checkpoint;
use ear_tsm::config::RunConfig;
use ear_tsm::ingest::{self, LabelMapping, SourceDataset};
use ear_tsm::net::build_model;
use ear_tsm::scorer::{self, FailurePolicy, Half, SplitAssignment};
use ear_tsm::synthetic::{self, SynthSpec};
use ear_tsm::trainer::Trainer;

fn main() -> ear_tsm::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ear_infer"), PathBuf::from);
    let cfg = RunConfig::desk().with_overrides(&["train.epochs=10"])?;
    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING)?;
    let scan = |dir: PathBuf, spec: SynthSpec| -> ear_tsm::Result<_> {
        synthetic::generate(&dir, &spec)?;
        Ok(ingest::build_manifest(&[(dir, SourceDataset::Synthetic)], &mapping, &[])?.entries)
    };
    let train = scan(out.join("train"), SynthSpec::default())?;
    let test = scan(
        out.join("test"),
        SynthSpec {
            subject: "S02".into(),
            seed: 1,
            ..SynthSpec::default()
        },
    )?;

    let split = ingest::split_manifest(&train, cfg.train.val_fraction, cfg.train.seed)?;
    let mut model = build_model(&cfg.backbone, &cfg.head, &cfg.shift, cfg.train.seed)?;
    let state = Trainer::new(cfg.train.clone(), cfg.clip_source())?.fit(
        &mut model,
        &split.train,
        &split.validation,
        &out.join("run"),
        false,
    )?;
    let best = Checkpoint::load(state.best_checkpoint_path.as_ref().expect("trained"))?;
    model.load_state(&best.model_state())?;

    let preds = scorer::predict_all(&model, &test, &cfg.crop, FailurePolicy::Strict)?;
    let submission = out.join("submission.csv");
    scorer::write_submission(&submission, &preds.rows)?;
    let truth = scorer::ground_truth_from_manifest(&test);
    let acc = scorer::score(&preds.rows, &truth)?;
    let assignment = SplitAssignment::new(truth.keys().map(String::as_str), 0);
    let (public, private) = scorer::split_score(&preds.rows, &truth, &assignment)?;
    println!("submission {}", submission.display());
    println!("overall {:.5} ({}/{})", acc.value(), acc.correct, acc.total);
    println!("public  {:.5} over {}", public.value(), assignment.count(Half::Public));
    println!("private {:.5} over {}", private.value(), assignment.count(Half::Private));
    Ok(())
}
