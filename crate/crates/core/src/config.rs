//! Declarative run configuration with `paper` and `desk` profiles.
//!
//! A config is a TOML document with one table per component. Any field can be
//! overridden from the command line with a dotted path (`train.lr=0.01`), and
//! the fully resolved document is echoed into every run directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SourceDataset;
use crate::net::{BackboneKind, BackboneSpec, HeadSpec};
use crate::sampler::{CropSpec, SampleMode};
use crate::shift::ShiftConfig;
use crate::trainer::{ClipSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected paper or desk)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub segments: usize,
    pub train_mode: SampleMode,
    /// Inference always samples segment centres.
    pub eval_mode: SampleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRoot {
    pub path: PathBuf,
    pub dataset: SourceDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub roots: Vec<DatasetRoot>,
    /// Label-mapping file, or `builtin` for the bundled mapping.
    pub mapping: String,
    /// `none`, `config1`, `config2`, or a filter file path.
    pub filter: String,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub sample: SampleConfig,
    pub crop: CropSpec,
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub shift: ShiftConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

pub const DEFAULT_OUTPUT_DIR: &str = "runs";
/// Environment variable that replaces [`DEFAULT_OUTPUT_DIR`] for profile-built configs.
pub const OUTPUT_ROOT_ENV: &str = "EAR_OUTPUT_ROOT";

const DESK_MAX_CROP: u32 = 64;

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// The published recipe: ResNeXt-50 32x4d, 8 segments, shift 1/8 in every
    /// residual block, SGD at 0.001 with steps at 20 and 40, 100 epochs.
    pub fn paper() -> Self {
        let segments = 8;
        Self {
            profile: Profile::Paper,
            sample: SampleConfig {
                segments,
                train_mode: SampleMode::TrainRandom,
                eval_mode: SampleMode::EvalCenter,
            },
            crop: CropSpec::default(),
            backbone: BackboneSpec::resnext50_32x4d(),
            head: HeadSpec::default(),
            shift: ShiftConfig::new(8, segments),
            train: TrainConfig::paper(),
            paths: PathsConfig {
                roots: Vec::new(),
                mapping: "builtin".into(),
                filter: "none".into(),
                output_dir: DEFAULT_OUTPUT_DIR.into(),
            },
        }
    }

    /// Laptop-scale variant for the synthetic colour dataset.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.profile = Profile::Desk;
        cfg.crop.resize_short_side = 36;
        cfg.crop.crop_size = 32;
        cfg.backbone = BackboneSpec::tiny_residual();
        cfg.shift.stages = vec![1, 2];
        cfg.head.dropout_rate = 0.0;
        cfg.train = TrainConfig {
            learning_rate: 0.05,
            lr_decay_epochs: vec![20],
            epochs: 30,
            batch_size: 12,
            loader_workers: 1,
            dropout_rate: 0.0,
            deterministic: true,
            ..TrainConfig::paper()
        };
        cfg.paths.roots = vec![DatasetRoot {
            path: "data/synthetic".into(),
            dataset: SourceDataset::Synthetic,
        }];
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The resolved config as TOML, every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Apply `key=value` overrides, where `key` is a dotted path into the document.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut doc, key.trim(), raw.trim())?;
        }
        doc.try_into()
            .map_err(|e| Error::Config(format!("invalid override: {e}")))
    }

    /// Every problem with the config, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                p.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        push(self.crop.validate());
        push(self.backbone.validate());
        push(self.head.validate());
        push(self.shift.validate());
        p.extend(self.train.problems());
        if self.sample.segments == 0 {
            p.push("sample.segments must be at least 1".into());
        }
        if self.sample.eval_mode != SampleMode::EvalCenter {
            p.push("sample.eval_mode must be eval_center".into());
        }
        if self.shift.segments != self.sample.segments {
            p.push(format!(
                "shift.segments ({}) must equal sample.segments ({})",
                self.shift.segments, self.sample.segments
            ));
        }
        if let Some(s) = self
            .shift
            .stages
            .iter()
            .find(|&&s| s == 0 || s > self.backbone.num_stages())
        {
            p.push(format!(
                "shift.stages entry {s} is outside 1..={} for {:?}",
                self.backbone.num_stages(),
                self.backbone.kind
            ));
        }
        if self.head.dropout_rate != self.train.dropout_rate {
            p.push(format!(
                "head.dropout_rate ({}) and train.dropout_rate ({}) disagree",
                self.head.dropout_rate, self.train.dropout_rate
            ));
        }
        if self.profile == Profile::Desk {
            if self.backbone.kind != BackboneKind::TinyResidual {
                p.push("profile desk requires backbone.kind = tiny_residual".into());
            }
            if self.crop.crop_size > DESK_MAX_CROP {
                p.push(format!(
                    "profile desk limits crop.crop_size to {DESK_MAX_CROP}, got {}",
                    self.crop.crop_size
                ));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} problem(s):\n  - {}",
                p.len(),
                p.join("\n  - ")
            )))
        }
    }

    /// Fields that differ from the published recipe; empty for an untouched paper profile.
    pub fn paper_deviations(&self) -> Vec<String> {
        let paper = Self::paper();
        let (Ok(mine), Ok(theirs)) = (
            toml::Table::try_from(self),
            toml::Table::try_from(&paper),
        ) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for section in ["sample", "crop", "backbone", "head", "shift", "train"] {
            diff_tables(section, mine.get(section), theirs.get(section), &mut out);
        }
        out
    }

    pub fn clip_source(&self) -> ClipSource {
        ClipSource {
            segments: self.sample.segments,
            train_mode: self.sample.train_mode,
            crop: self.crop.clone(),
        }
    }
}

const ALIASES: &[(&str, &str)] = &[
    ("train.lr", "train.learning_rate"),
    ("train.wd", "train.weight_decay"),
    ("train.clip", "train.grad_clip_norm"),
    ("train.dropout", "train.dropout_rate"),
    ("head.dropout", "head.dropout_rate"),
];

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let key = ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, k)| k);
    let parts: Vec<&str> = key.split('.').collect();
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let (last, parents) = parts.split_last().ok_or_else(unknown)?;
    let mut table = doc;
    for p in parents {
        table = table
            .get_mut(*p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(unknown)?;
    }
    let slot = table.get_mut(*last).ok_or_else(unknown)?;
    let mut value = parse_value(raw);
    // keep integer-typed fields integral and float-typed fields floating
    if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
        value = toml::Value::Float(*i as f64);
    }
    if slot.is_table() {
        return Err(Error::Config(format!("`{key}` is a section, not a field")));
    }
    *slot = value;
    Ok(())
}

fn diff_tables(path: &str, a: Option<&toml::Value>, b: Option<&toml::Value>, out: &mut Vec<String>) {
    match (a, b) {
        (Some(toml::Value::Table(x)), Some(toml::Value::Table(y))) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                diff_tables(&format!("{path}.{k}"), x.get(k), y.get(k), out);
            }
        }
        (x, y) if x != y => out.push(format!(
            "{path}: {} (paper: {})",
            x.map_or("<missing>".into(), |v| v.to_string()),
            y.map_or("<missing>".into(), |v| v.to_string())
        )),
        _ => {}
    }
}

/// Line diff between two specs, used when a checkpoint disagrees with a config.
pub fn spec_diff(label_a: &str, a: &str, label_b: &str, b: &str) -> String {
    let (Ok(ta), Ok(tb)) = (a.parse::<toml::Table>(), b.parse::<toml::Table>()) else {
        return format!("--- {label_a}\n{a}\n+++ {label_b}\n{b}");
    };
    let mut out = Vec::new();
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        diff_tables(k, ta.get(k), tb.get(k), &mut out);
    }
    out.iter()
        .map(|l| l.replacen("(paper:", &format!("({label_b}:"), 1))
        .map(|l| format!("  {label_a} {l}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn resolve_output_dir(cfg: &mut RunConfig) {
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() && cfg.paths.output_dir == Path::new(DEFAULT_OUTPUT_DIR) {
            cfg.paths.output_dir = root.into();
        }
    }
}
