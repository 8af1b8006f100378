//! The `ear` command-line front end.
//!
//! Exit status: 0 on success, 2 for configuration and input errors, 3 when a
//! submission fails validation against ground truth, 1 for internal failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{self, Profile, RunConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, EarCategory, LabelMapping, SourceDataset};
use crate::net::build_model;
use crate::scorer::{self, FailurePolicy, Half, SplitAssignment};
use crate::synthetic::{self, SynthSpec};
use crate::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(name = "ear", version, about = "Temporal-shift action recognition for the EAR categories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan frame-store roots into a manifest CSV.
    Manifest(ManifestArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Predict every video in a manifest and write a submission CSV.
    Infer(InferArgs),
    /// Score a submission against ground truth.
    Score(ScoreArgs),
    /// Render a leaderboard table, and optionally a confusion matrix.
    Report(ReportArgs),
    /// Write a colour-coded synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// `DATASET=PATH`, repeatable. Datasets: toyota_smarthome, etri_activity3d, etri_livinglab, synthetic.
    #[arg(long = "root", required = true)]
    pub roots: Vec<String>,
    /// Label-mapping TOML, or `builtin`.
    #[arg(long, default_value = "builtin")]
    pub mapping: String,
    /// `none`, `config1`, `config2`, or a filter TOML.
    #[arg(long, default_value = "none")]
    pub filter: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `video_id,ear_label` ground truth.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Run config TOML; takes precedence over `--profile`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    /// `KEY=VALUE` override with a dotted key; `--train.lr 0.01` is shorthand.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Labelled manifest, split into train and validation unless `--val-manifest`
    /// is given. Without it the manifest is built from `paths.roots`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run directory; defaults to `paths.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fall back to the most frequent class for unreadable videos.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub submission: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Also report public and private halves under this split seed.
    #[arg(long)]
    pub split: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Leaderboard CSV `name,public,private`; defaults to the bundled challenge table.
    #[arg(long)]
    pub leaderboard: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    pub submission: Option<PathBuf>,
    #[arg(long, requires = "submission")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos_per_class: usize,
    #[arg(long, default_value = "S01")]
    pub subject: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Rewrite `--section.field VALUE` and `--section.field=VALUE` into `--set section.field=VALUE`.
pub fn expand_dotted_flags(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')))
            .map(str::to_string);
        match dotted {
            Some(s) if s.contains('=') => {
                out.push("--set".into());
                out.push(s.into());
            }
            Some(key) => {
                let value = it.next().unwrap_or_default();
                out.push("--set".into());
                let mut kv = OsString::from(format!("{key}="));
                kv.push(value);
                out.push(kv);
            }
            None => out.push(arg),
        }
    }
    out
}

/// Parse arguments, run, print errors and return the exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_dotted_flags(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Manifest(a) => cmd_manifest(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn parse_root(s: &str) -> Result<(PathBuf, SourceDataset)> {
    let (dataset, path) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--root `{s}` is not DATASET=PATH")))?;
    Ok((PathBuf::from(path), dataset.parse()?))
}

fn load_mapping(spec: &str) -> Result<LabelMapping> {
    match spec {
        "builtin" => LabelMapping::parse(ingest::DEFAULT_MAPPING),
        path => LabelMapping::load(Path::new(path)),
    }
}

fn load_filter(spec: &str) -> Result<Vec<ingest::SubsetFilter>> {
    match spec {
        "none" => Ok(Vec::new()),
        other => ingest::load_filters(other),
    }
}

pub fn cmd_manifest(args: &ManifestArgs) -> Result<()> {
    let roots = args
        .roots
        .iter()
        .map(|r| parse_root(r))
        .collect::<Result<Vec<_>>>()?;
    let mapping = load_mapping(&args.mapping)?;
    let filters = load_filter(&args.filter)?;
    let report = ingest::build_manifest(&roots, &mapping, &filters)?;
    ingest::write_manifest(&args.out, &report.entries)?;
    if let Some(path) = &args.truth_out {
        scorer::write_ground_truth(path, &scorer::ground_truth_from_manifest(&report.entries))?;
    }
    println!("{} videos written to {}", report.entries.len(), args.out.display());
    for (category, n) in report.category_counts() {
        println!("  {category:<14} {n}");
    }
    if report.filtered_out > 0 {
        println!("  filtered out   {}", report.filtered_out);
    }
    for (dataset, label) in &report.unmapped {
        println!("  unmapped       {dataset}/{label}");
    }
    Ok(())
}

/// Resolve a run config from file or profile plus overrides.
pub fn resolve_config(args: &ConfigArgs, default_profile: Profile) -> Result<RunConfig> {
    let base = match (&args.config, &args.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => {
            let mut c = RunConfig::profile(p.parse()?);
            config::resolve_output_dir(&mut c);
            c
        }
        (None, None) => {
            let mut c = RunConfig::profile(default_profile);
            config::resolve_output_dir(&mut c);
            c
        }
    };
    base.with_overrides(&args.overrides)
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn section_hashes(cfg: &RunConfig) -> String {
    let sections: [(&str, String); 6] = [
        ("sample", toml::to_string(&cfg.sample).unwrap_or_default()),
        ("crop", toml::to_string(&cfg.crop).unwrap_or_default()),
        ("backbone", toml::to_string(&cfg.backbone).unwrap_or_default()),
        ("head", toml::to_string(&cfg.head).unwrap_or_default()),
        ("shift", toml::to_string(&cfg.shift).unwrap_or_default()),
        ("train", toml::to_string(&cfg.train).unwrap_or_default()),
    ];
    sections
        .iter()
        .map(|(k, v)| format!("{k} = \"{}\"\n", sha256_hex(v)))
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.config, Profile::Desk)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(out) = &args.out {
        cfg.paths.output_dir = out.clone();
    }
    cfg.validate()?;
    for d in cfg.paper_deviations() {
        log::debug!("differs from the paper profile: {d}");
    }
    let run_dir = cfg.paths.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let snapshot = run_dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    let hashes = run_dir.join("spec_hashes.toml");
    fs::write(&hashes, section_hashes(&cfg)).map_err(|e| Error::io(&hashes, e))?;
    if cfg.train.epochs == 0 {
        println!("0 epochs requested; config written to {}", snapshot.display());
        return Ok(());
    }

    let manifest = match &args.manifest {
        Some(path) => ingest::read_manifest(path)?,
        None => {
            if cfg.paths.roots.is_empty() {
                return Err(Error::Config(
                    "pass --manifest or list dataset roots under paths.roots".into(),
                ));
            }
            let roots: Vec<(PathBuf, SourceDataset)> = cfg
                .paths
                .roots
                .iter()
                .map(|r| (r.path.clone(), r.dataset))
                .collect();
            let mapping = load_mapping(&cfg.paths.mapping)?;
            let filters = load_filter(&cfg.paths.filter)?;
            ingest::build_manifest(&roots, &mapping, &filters)?.entries
        }
    };
    let (train, validation) = match &args.val_manifest {
        Some(p) => (manifest, ingest::read_manifest(p)?),
        None => {
            let split = ingest::split_manifest(&manifest, cfg.train.val_fraction, cfg.train.seed)?;
            if !split.train_only.is_empty() {
                log::warn!(
                    "categories with fewer than two videos stay in training only: {}",
                    split.train_only.join(", ")
                );
            }
            (split.train, split.validation)
        }
    };
    ingest::write_manifest(&run_dir.join("train_split.csv"), &train)?;
    ingest::write_manifest(&run_dir.join("val_split.csv"), &validation)?;

    let mut model = build_model(&cfg.backbone, &cfg.head, &cfg.shift, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.clip_source())?;
    let state = trainer.fit(&mut model, &train, &validation, &run_dir, args.resume)?;
    match (&state.best_checkpoint_path, state.best_epoch) {
        (Some(path), Some(epoch)) => println!(
            "best validation accuracy {:.5} at epoch {epoch}; checkpoint {}",
            state.best_val_accuracy,
            path.display()
        ),
        _ => println!("no checkpoint written"),
    }
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let c = &args.config;
    if c.config.is_some() || c.profile.is_some() || !c.overrides.is_empty() {
        let cfg = resolve_config(c, Profile::Desk)?;
        check_specs(&ck, &cfg)?;
    }
    let meta = &ck.meta;
    // the stored weights replace any initialisation
    let backbone = crate::net::BackboneSpec {
        pretrained_init: false,
        pretrained_path: String::new(),
        ..meta.backbone.clone()
    };
    let mut model = build_model(&backbone, &meta.head, &meta.shift, 0)?;
    model.load_state(&ck.model_state())?;
    let manifest = ingest::read_manifest(&args.manifest)?;
    let policy = if args.lenient {
        FailurePolicy::Lenient
    } else {
        FailurePolicy::Strict
    };
    let preds = scorer::predict_all(&model, &manifest, &meta.crop, policy)?;
    scorer::write_submission(&args.out, &preds.rows)?;
    println!("{} predictions written to {}", preds.rows.len(), args.out.display());
    if !preds.fallbacks.is_empty() {
        println!("{} videos used the fallback class:", preds.fallbacks.len());
        for (id, why) in &preds.fallbacks {
            println!("  {id}: {why}");
        }
    }
    Ok(())
}

/// Refuse a checkpoint whose model specs differ from the run config.
pub fn check_specs(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Specs<'a> {
        backbone: &'a crate::net::BackboneSpec,
        head: &'a crate::net::HeadSpec,
        shift: &'a crate::shift::ShiftConfig,
        crop: &'a crate::sampler::CropSpec,
    }
    let theirs = toml::to_string(&Specs {
        backbone: &ck.meta.backbone,
        head: &ck.meta.head,
        shift: &ck.meta.shift,
        crop: &ck.meta.crop,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mine = toml::to_string(&Specs {
        backbone: &cfg.backbone,
        head: &cfg.head,
        shift: &cfg.shift,
        crop: &cfg.crop,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if theirs == mine {
        Ok(())
    } else {
        Err(Error::SpecMismatch(config::spec_diff(
            "checkpoint",
            &theirs,
            "config",
            &mine,
        )))
    }
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let rows = scorer::read_submission(&args.submission)?;
    let truth = scorer::read_ground_truth(&args.truth)?;
    let acc = scorer::score(&rows, &truth)?;
    println!("{:.5}", acc.value());
    if let Some(seed) = args.split {
        let assignment = SplitAssignment::new(truth.keys().map(String::as_str), seed);
        let (public, private) = scorer::split_score(&rows, &truth, &assignment)?;
        println!(
            "public  {:.5} ({} videos)",
            public.value(),
            assignment.count(Half::Public)
        );
        println!(
            "private {:.5} ({} videos)",
            private.value(),
            assignment.count(Half::Private)
        );
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let rows = match &args.leaderboard {
        Some(p) => scorer::read_leaderboard(p)?,
        None => scorer::parse_leaderboard(scorer::CHALLENGE_LEADERBOARD)?,
    };
    print!("{}", scorer::render_leaderboard(&rows)?);
    if let (Some(sub), Some(truth)) = (&args.submission, &args.truth) {
        let m = scorer::confusion_matrix(
            &scorer::read_submission(sub)?,
            &scorer::read_ground_truth(truth)?,
        )?;
        println!();
        print!("{:<14}", "truth\\pred");
        for c in EarCategory::ALL {
            print!(" {:>6.6}", c.as_str());
        }
        println!();
        for (c, row) in EarCategory::ALL.iter().zip(m) {
            print!("{:<14}", c.as_str());
            for n in row {
                print!(" {n:>6}");
            }
            println!();
        }
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        videos_per_class: args.videos_per_class,
        subject: args.subject.clone(),
        seed: args.seed,
        ..SynthSpec::default()
    };
    let videos = synthetic::generate(&args.out, &spec)?;
    println!("{} synthetic videos written to {}", videos.len(), args.out.display());
    Ok(())
}
