//! Manifest construction from frame-store roots.
//!
//! A root holds one directory per video, each containing `img_00000.jpg`,
//! `img_00001.jpg`, ... Source labels and subject ids are parsed from the
//! directory name:
//!
//! * Toyota Smarthome: `<Label>_p<NN>_...`, e.g. `Cook.Cut_p03_r00_v12_c05`.
//!   The label is everything before the first `p<digits>` token.
//! * ETRI-Activity3D, ETRI LivingLab and synthetic roots:
//!   `<Label>_<Subject>_...`, e.g. `A031_P095_G001_C002`.
//!
//! Labels are mapped onto the six EAR categories by an ordered rule list;
//! subjects are filtered by inclusive ranges per dataset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarCategory {
    Locomotion,
    Manipulation,
    Hygiene,
    Eating,
    Communication,
    Leisure,
}

impl EarCategory {
    pub const ALL: [EarCategory; 6] = [
        EarCategory::Locomotion,
        EarCategory::Manipulation,
        EarCategory::Hygiene,
        EarCategory::Eating,
        EarCategory::Communication,
        EarCategory::Leisure,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EarCategory::Locomotion => "locomotion",
            EarCategory::Manipulation => "manipulation",
            EarCategory::Hygiene => "hygiene",
            EarCategory::Eating => "eating",
            EarCategory::Communication => "communication",
            EarCategory::Leisure => "leisure",
        }
    }
}

impl fmt::Display for EarCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EarCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown EAR category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDataset {
    ToyotaSmarthome,
    EtriActivity3d,
    EtriLivinglab,
    Synthetic,
}

impl SourceDataset {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceDataset::ToyotaSmarthome => "toyota_smarthome",
            SourceDataset::EtriActivity3d => "etri_activity3d",
            SourceDataset::EtriLivinglab => "etri_livinglab",
            SourceDataset::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for SourceDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SourceDataset::ToyotaSmarthome,
            SourceDataset::EtriActivity3d,
            SourceDataset::EtriLivinglab,
            SourceDataset::Synthetic,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| Error::Input(format!("unknown source dataset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frame_dir: PathBuf,
    pub frame_count: usize,
    pub source_dataset: SourceDataset,
    pub source_label: String,
    pub ear_label: Option<EarCategory>,
    pub subject_id: Option<String>,
}

pub const MANIFEST_HEADER: &str =
    "video_id,frame_dir,frame_count,source_dataset,source_label,ear_label,subject_id";

/// `*` matches any (possibly empty) run of characters; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmappedPolicy {
    Error,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub dataset: SourceDataset,
    pub pattern: String,
    pub ear_label: EarCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMapping {
    pub unmapped_policy: UnmappedPolicy,
    #[serde(default)]
    pub rules: Vec<LabelRule>,
}

impl LabelMapping {
    pub fn parse(text: &str) -> Result<Self> {
        let mapping: LabelMapping = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid label mapping: {e}")))?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<(SourceDataset, &str), EarCategory> = BTreeMap::new();
        for rule in &self.rules {
            if let Some(prev) = seen.insert((rule.dataset, &rule.pattern), rule.ear_label) {
                if prev != rule.ear_label {
                    return Err(Error::Config(format!(
                        "conflicting rules for ({}, `{}`): {} vs {}",
                        rule.dataset, rule.pattern, prev, rule.ear_label
                    )));
                }
            }
        }
        Ok(())
    }

    /// First rule matching `(dataset, label)`.
    pub fn lookup(&self, dataset: SourceDataset, label: &str) -> Option<EarCategory> {
        self.rules
            .iter()
            .find(|r| r.dataset == dataset && glob_match(&r.pattern, label))
            .map(|r| r.ear_label)
    }
}

/// Inclusive subject range such as `P091-P100`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectRange {
    prefix: String,
    lo: u32,
    hi: u32,
}

fn split_subject(s: &str) -> Option<(&str, u32)> {
    let digits = s.len() - s.trim_start_matches(|c: char| !c.is_ascii_digit()).len();
    let (prefix, num) = s.split_at(digits);
    if prefix.is_empty() || num.is_empty() || !num.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((prefix, num.parse().ok()?))
}

impl SubjectRange {
    pub fn contains(&self, subject: &str) -> bool {
        match split_subject(subject) {
            Some((prefix, n)) => prefix.eq_ignore_ascii_case(&self.prefix) && (self.lo..=self.hi).contains(&n),
            None => false,
        }
    }
}

impl FromStr for SubjectRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("invalid subject range `{s}`: {why}"));
        let (a, b) = s.split_once('-').ok_or_else(|| bad("expected `<lo>-<hi>`"))?;
        let (pa, lo) = split_subject(a.trim()).ok_or_else(|| bad("malformed lower bound"))?;
        let (pb, hi) = split_subject(b.trim()).ok_or_else(|| bad("malformed upper bound"))?;
        if !pa.eq_ignore_ascii_case(pb) {
            return Err(bad("bounds must share a prefix"));
        }
        if lo > hi {
            return Err(bad("lower bound exceeds upper bound"));
        }
        Ok(Self {
            prefix: pa.to_string(),
            lo,
            hi,
        })
    }
}

impl fmt::Display for SubjectRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:03}-{}{:03}", self.prefix, self.lo, self.prefix, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetFilter {
    pub dataset: SourceDataset,
    pub subjects: SubjectRange,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterFile {
    #[serde(default)]
    filters: Vec<FilterRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRow {
    dataset: SourceDataset,
    subjects: String,
}

/// Restricts ETRI-Activity3D to P091-P100 and LivingLab to P201-P230.
pub const CONFIG1_FILTERS: &str = include_str!("../assets/filters_config1.toml");
/// Full ETRI-Activity3D and LivingLab.
pub const CONFIG2_FILTERS: &str = include_str!("../assets/filters_config2.toml");
/// Reconstructed source-label mapping shipped with the crate.
pub const DEFAULT_MAPPING: &str = include_str!("../assets/label_mapping.toml");

pub fn parse_filters(text: &str) -> Result<Vec<SubsetFilter>> {
    let file: FilterFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid filter file: {e}")))?;
    file.filters
        .into_iter()
        .map(|row| {
            Ok(SubsetFilter {
                dataset: row.dataset,
                subjects: row.subjects.parse()?,
            })
        })
        .collect()
}

/// Resolve `config1`, `config2`, or a path to a filter file.
pub fn load_filters(spec: &str) -> Result<Vec<SubsetFilter>> {
    match spec {
        "config1" => parse_filters(CONFIG1_FILTERS),
        "config2" => parse_filters(CONFIG2_FILTERS),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_filters(&text)
        }
    }
}

/// `(source_label, subject_id)` parsed from a video directory name.
pub fn parse_video_name(dataset: SourceDataset, name: &str) -> (String, Option<String>) {
    let tokens: Vec<&str> = name.split('_').collect();
    let is_subject = |t: &str| split_subject(t).is_some_and(|(p, _)| p.chars().all(|c| c.is_ascii_alphabetic()));
    match dataset {
        SourceDataset::ToyotaSmarthome => {
            let pos = tokens.iter().position(|t| {
                t.len() > 1 && (t.starts_with('p') || t.starts_with('P')) && t[1..].chars().all(|c| c.is_ascii_digit())
            });
            match pos {
                Some(i) if i > 0 => (tokens[..i].join("_"), Some(tokens[i].to_string())),
                _ => (name.to_string(), None),
            }
        }
        _ => {
            let subject = tokens.get(1).filter(|t| is_subject(t)).map(|t| t.to_string());
            (tokens[0].to_string(), subject)
        }
    }
}

fn parse_frame_index(file_name: &str) -> Option<usize> {
    let digits = file_name.strip_prefix("img_")?.strip_suffix(".jpg")?;
    if digits.len() != 5 || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Count frames in a frame store, requiring contiguous 0-based numbering.
pub fn count_frames(video_id: &str, dir: &Path) -> Result<usize> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Ingest {
            video_id: video_id.to_string(),
            message: format!("no img_XXXXX.jpg frames in {}", dir.display()),
        });
    }
    if let Some((expected, got)) = indices.iter().enumerate().find(|(i, v)| *i != **v) {
        return Err(Error::Ingest {
            video_id: video_id.to_string(),
            message: format!("frame numbering has a gap: expected img_{expected:05}.jpg, found img_{got:05}.jpg"),
        });
    }
    Ok(indices.len())
}

#[derive(Debug, Clone, Default)]
pub struct ManifestReport {
    pub entries: Vec<ManifestEntry>,
    /// Videos removed by subject filters.
    pub filtered_out: usize,
    /// `(dataset, label)` pairs dropped for lack of a mapping rule.
    pub unmapped: BTreeSet<(SourceDataset, String)>,
}

impl ManifestReport {
    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        category_counts(&self.entries)
    }
}

pub fn category_counts(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in entries {
        let key = e.ear_label.map_or("unlabeled".to_string(), |c| c.to_string());
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

fn passes_filters(dataset: SourceDataset, subject: Option<&str>, filters: &[SubsetFilter]) -> bool {
    let mut relevant = filters.iter().filter(|f| f.dataset == dataset).peekable();
    if relevant.peek().is_none() {
        return true;
    }
    match subject {
        Some(s) => relevant.any(|f| f.subjects.contains(s)),
        None => false,
    }
}

enum Scanned {
    Kept(ManifestEntry),
    Filtered,
    Unmapped(SourceDataset, String),
}

fn scan_root(
    root: &Path,
    dataset: SourceDataset,
    mapping: &LabelMapping,
    filters: &[SubsetFilter],
) -> Result<Vec<Scanned>> {
    if !root.is_dir() {
        return Err(Error::Input(format!("root {} does not exist", root.display())));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                dirs.push(name.to_string());
            }
        }
    }
    dirs.sort();
    let mut out = Vec::with_capacity(dirs.len());
    for video_id in dirs {
        let (label, subject) = parse_video_name(dataset, &video_id);
        if !passes_filters(dataset, subject.as_deref(), filters) {
            out.push(Scanned::Filtered);
            continue;
        }
        let ear_label = mapping.lookup(dataset, &label);
        if ear_label.is_none() {
            if mapping.unmapped_policy == UnmappedPolicy::Error {
                return Err(Error::Config(format!(
                    "no mapping rule for ({dataset}, `{label}`) from video {video_id}"
                )));
            }
            out.push(Scanned::Unmapped(dataset, label));
            continue;
        }
        let frame_dir = root.join(&video_id);
        let frame_count = count_frames(&video_id, &frame_dir)?;
        out.push(Scanned::Kept(ManifestEntry {
            video_id,
            frame_dir,
            frame_count,
            source_dataset: dataset,
            source_label: label,
            ear_label,
            subject_id: subject,
        }));
    }
    Ok(out)
}

/// Scan frame-store roots into a manifest sorted by `video_id`.
pub fn build_manifest(
    roots: &[(PathBuf, SourceDataset)],
    mapping: &LabelMapping,
    filters: &[SubsetFilter],
) -> Result<ManifestReport> {
    mapping.validate()?;
    let scanned: Vec<Vec<Scanned>> = roots
        .par_iter()
        .map(|(root, dataset)| scan_root(root, *dataset, mapping, filters))
        .collect::<Result<_>>()?;
    let mut report = ManifestReport::default();
    for item in scanned.into_iter().flatten() {
        match item {
            Scanned::Kept(e) => report.entries.push(e),
            Scanned::Filtered => report.filtered_out += 1,
            Scanned::Unmapped(d, l) => {
                report.unmapped.insert((d, l));
            }
        }
    }
    report.entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let dups: Vec<&str> = report
        .entries
        .windows(2)
        .filter(|w| w[0].video_id == w[1].video_id)
        .map(|w| w[0].video_id.as_str())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Conflict(format!(
            "video ids appear in more than one root: {}",
            dups.join(", ")
        )));
    }
    if report.entries.is_empty() {
        log::warn!("manifest is empty after scanning {} roots", roots.len());
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SplitReport {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    /// Categories with fewer than two videos, kept entirely in `train`.
    pub train_only: Vec<String>,
}

/// Seeded stratified partition into train and validation.
///
/// Each category with `n >= 2` videos contributes `round(n * fraction)`
/// videos to validation, clamped to `[1, n - 1]`.
pub fn split_manifest(manifest: &[ManifestEntry], holdout_fraction: f64, seed: u64) -> Result<SplitReport> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Input(format!(
            "holdout fraction must lie strictly between 0 and 1, got {holdout_fraction}"
        )));
    }
    let mut groups: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in manifest {
        let key = e.ear_label.map_or("unlabeled".to_string(), |c| c.to_string());
        groups.entry(key).or_default().push(e);
    }
    let mut val_ids = HashSet::new();
    let mut train_only = Vec::new();
    for (key, mut members) in groups {
        let n = members.len();
        if n < 2 {
            train_only.push(key);
            continue;
        }
        members.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let mut r = rng::substream(seed, "split", &[key.as_str().into()]);
        members.shuffle(&mut r);
        let k = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
        val_ids.extend(members[..k].iter().map(|e| e.video_id.clone()));
    }
    let mut sorted = manifest.to_vec();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let (validation, train) = sorted.into_iter().partition(|e| val_ids.contains(&e.video_id));
    Ok(SplitReport {
        train,
        validation,
        train_only,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    video_id: String,
    frame_dir: String,
    frame_count: usize,
    source_dataset: SourceDataset,
    source_label: String,
    ear_label: Option<EarCategory>,
    subject_id: Option<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    for e in entries {
        w.serialize(ManifestRow {
            video_id: e.video_id.clone(),
            frame_dir: e.frame_dir.to_string_lossy().into_owned(),
            frame_count: e.frame_count,
            source_dataset: e.source_dataset,
            source_label: e.source_label.clone(),
            ear_label: e.ear_label,
            subject_id: e.subject_id.clone(),
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    if entries.is_empty() {
        drop(w);
        fs::write(path, format!("{MANIFEST_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        return Ok(());
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != MANIFEST_HEADER {
        return Err(Error::Input(format!(
            "{}: manifest header must be `{MANIFEST_HEADER}`, got `{header}`",
            path.display()
        )));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if !seen.insert(row.video_id.clone()) {
            return Err(Error::Conflict(format!("duplicate video id {} in {}", row.video_id, path.display())));
        }
        entries.push(ManifestEntry {
            video_id: row.video_id,
            frame_dir: PathBuf::from(row.frame_dir),
            frame_count: row.frame_count,
            source_dataset: row.source_dataset,
            source_label: row.source_label,
            ear_label: row.ear_label,
            subject_id: row.subject_id.filter(|s| !s.is_empty()),
        });
    }
    Ok(entries)
}
