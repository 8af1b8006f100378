//! Challenge evaluation: per-video prediction, submission files, average
//! accuracy, public/private leaderboard halves and table rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EarCategory, ManifestEntry};
use crate::net::{Mode, Model};
use crate::rng;
use crate::sampler::{load_clip, CropSpec, SampleSpec};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubmissionRow {
    pub video_id: String,
    pub predicted: EarCategory,
}

pub type GroundTruth = BTreeMap<String, EarCategory>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    /// Abort on the first unreadable video.
    Strict,
    /// Predict the most frequent class among readable videos instead.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub rows: Vec<SubmissionRow>,
    /// Videos that fell back to the most frequent class, with the reason.
    pub fallbacks: Vec<(String, String)>,
}

/// Predict every manifest entry with eval-centre sampling and a centre crop.
///
/// Output is sorted by `video_id` and independent of manifest order.
pub fn predict_all(
    model: &Model,
    manifest: &[ManifestEntry],
    crop: &CropSpec,
    policy: FailurePolicy,
) -> Result<Predictions> {
    let spec = SampleSpec::eval(model.shift().segments);
    let mut entries: Vec<&ManifestEntry> = manifest.iter().collect();
    entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let outcomes: Vec<(String, Result<EarCategory>)> = entries
        .par_iter()
        .map(|e| {
            let pred = load_clip(e, &spec, crop).and_then(|clip| {
                let logits = model.forward_clip(&clip, Mode::Eval)?;
                Ok(EarCategory::from_index(logits.argmax()[0]).expect("six classes"))
            });
            (e.video_id.clone(), pred)
        })
        .collect();

    let mut counts = [0usize; 6];
    for (_, r) in &outcomes {
        if let Ok(c) = r {
            counts[c.index()] += 1;
        }
    }
    // ties resolve to the earliest category
    let fallback = EarCategory::ALL
        .into_iter()
        .max_by(|a, b| counts[a.index()].cmp(&counts[b.index()]).then(b.index().cmp(&a.index())))
        .expect("non-empty");

    let mut out = Predictions::default();
    for (video_id, r) in outcomes {
        match r {
            Ok(predicted) => out.rows.push(SubmissionRow { video_id, predicted }),
            Err(e) if policy == FailurePolicy::Strict => return Err(e),
            Err(e) => {
                out.fallbacks.push((video_id.clone(), e.to_string()));
                out.rows.push(SubmissionRow {
                    video_id,
                    predicted: fallback,
                });
            }
        }
    }
    Ok(out)
}

/// Canonical submission text: header, LF endings, sorted by video id.
pub fn format_submission(rows: &[SubmissionRow]) -> Result<String> {
    let mut sorted: Vec<&SubmissionRow> = rows.iter().collect();
    sorted.sort();
    let mut out = String::from("video_id,predicted\n");
    for r in sorted {
        if r.video_id.is_empty() || r.video_id.contains([',', '\n', '\r', '"']) {
            return Err(Error::Input(format!(
                "video id `{}` cannot be written to a submission",
                r.video_id
            )));
        }
        let _ = writeln!(out, "{},{}", r.video_id, r.predicted);
    }
    Ok(out)
}

pub fn write_submission(path: &Path, rows: &[SubmissionRow]) -> Result<()> {
    fs::write(path, format_submission(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_submission(path: &Path) -> Result<Vec<SubmissionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    for row in r.deserialize::<SubmissionRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.video_id.is_empty() {
            return Err(Error::Input(format!("{}: empty video id", path.display())));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    video_id: String,
    ear_label: EarCategory,
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut truth = GroundTruth::new();
    let mut dups = Vec::new();
    for row in r.deserialize::<TruthRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if truth.insert(row.video_id.clone(), row.ear_label).is_some() {
            dups.push(row.video_id);
        }
    }
    if !dups.is_empty() {
        return Err(Error::Validation(vec![format!(
            "duplicate ground-truth ids: {}",
            dups.join(", ")
        )]));
    }
    Ok(truth)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut out = String::from("video_id,ear_label\n");
    for (id, label) in truth {
        let _ = writeln!(out, "{id},{label}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Ground truth taken from labelled manifest entries.
pub fn ground_truth_from_manifest(manifest: &[ManifestEntry]) -> GroundTruth {
    manifest
        .iter()
        .filter_map(|e| e.ear_label.map(|l| (e.video_id.clone(), l)))
        .collect()
}

/// Exact count-based accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn check_alignment<'a>(
    predictions: &'a [SubmissionRow],
    truth: &GroundTruth,
) -> Result<HashMap<&'a str, EarCategory>> {
    let mut problems = Vec::new();
    let mut seen = HashMap::new();
    let mut dups = Vec::new();
    let mut unknown = Vec::new();
    for row in predictions {
        if seen.insert(row.video_id.as_str(), row.predicted).is_some() {
            dups.push(row.video_id.as_str());
        }
        if !truth.contains_key(&row.video_id) {
            unknown.push(row.video_id.as_str());
        }
    }
    let missing: Vec<&str> = truth
        .keys()
        .filter(|id| !seen.contains_key(id.as_str()))
        .map(String::as_str)
        .collect();
    if !dups.is_empty() {
        dups.sort_unstable();
        dups.dedup();
        problems.push(format!("duplicate predictions: {}", dups.join(", ")));
    }
    if !unknown.is_empty() {
        problems.push(format!("ids not in ground truth: {}", unknown.join(", ")));
    }
    if !missing.is_empty() {
        problems.push(format!("ids without a prediction: {}", missing.join(", ")));
    }
    if predictions.is_empty() && truth.is_empty() {
        problems.push("nothing to score".into());
    }
    if problems.is_empty() {
        Ok(seen)
    } else {
        Err(Error::Validation(problems))
    }
}

/// Fraction of videos whose prediction equals the ground truth.
pub fn score(predictions: &[SubmissionRow], truth: &GroundTruth) -> Result<Accuracy> {
    let preds = check_alignment(predictions, truth)?;
    let correct = truth.iter().filter(|(id, l)| preds[id.as_str()] == **l).count() as u64;
    Ok(Accuracy {
        correct,
        total: truth.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Half {
    Public,
    Private,
}

/// Deterministic public/private partition of a set of video ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    halves: BTreeMap<String, Half>,
}

impl SplitAssignment {
    /// Parity of a stable 64-bit hash of `(seed, id)`, then the smallest-hash
    /// members of the larger half move across until the halves differ by at
    /// most one. Input order and duplicates do not matter.
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        let unique: std::collections::BTreeSet<&str> = ids.into_iter().collect();
        let hashed: Vec<(u64, &str)> = unique
            .into_iter()
            .map(|id| (rng::stable_hash(seed, "leaderboard_split", &[id.into()]), id))
            .collect();
        let (mut public, mut private): (Vec<_>, Vec<_>) =
            hashed.into_iter().partition(|(h, _)| h & 1 == 0);
        let (larger, smaller) = if public.len() > private.len() {
            (&mut public, &mut private)
        } else {
            (&mut private, &mut public)
        };
        let moves = (larger.len() - smaller.len()) / 2;
        larger.sort();
        smaller.extend(larger.drain(..moves));
        let mut halves = BTreeMap::new();
        for (_, id) in public {
            halves.insert(id.to_string(), Half::Public);
        }
        for (_, id) in private {
            halves.insert(id.to_string(), Half::Private);
        }
        Self { halves }
    }

    pub fn get(&self, id: &str) -> Option<Half> {
        self.halves.get(id).copied()
    }

    pub fn count(&self, half: Half) -> usize {
        self.halves.values().filter(|h| **h == half).count()
    }

    pub fn len(&self) -> usize {
        self.halves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.halves.is_empty()
    }
}

/// Accuracy on the public and private halves.
pub fn split_score(
    predictions: &[SubmissionRow],
    truth: &GroundTruth,
    assignment: &SplitAssignment,
) -> Result<(Accuracy, Accuracy)> {
    let preds = check_alignment(predictions, truth)?;
    let uncovered: Vec<&str> = truth
        .keys()
        .filter(|id| assignment.get(id).is_none())
        .map(String::as_str)
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Validation(vec![format!(
            "ids missing from the split assignment: {}",
            uncovered.join(", ")
        )]));
    }
    let mut public = Accuracy { correct: 0, total: 0 };
    let mut private = public;
    for (id, label) in truth {
        let acc = match assignment.get(id).expect("checked") {
            Half::Public => &mut public,
            Half::Private => &mut private,
        };
        acc.total += 1;
        if preds[id.as_str()] == *label {
            acc.correct += 1;
        }
    }
    Ok((public, private))
}

/// `confusion[truth][predicted]` counts.
pub fn confusion_matrix(predictions: &[SubmissionRow], truth: &GroundTruth) -> Result<[[u64; 6]; 6]> {
    let preds = check_alignment(predictions, truth)?;
    let mut m = [[0u64; 6]; 6];
    for (id, label) in truth {
        m[label.index()][preds[id.as_str()].index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub name: String,
    pub public: f64,
    pub private: f64,
}

/// Leaderboard values reported for the challenge, used as a rendering fixture.
pub const CHALLENGE_LEADERBOARD: &str = include_str!("../assets/challenge_leaderboard.csv");

pub fn parse_leaderboard(text: &str) -> Result<Vec<LeaderboardRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<LeaderboardRow>()
        .map(|row| row.map_err(|e| Error::Input(format!("invalid leaderboard row: {e}"))))
        .collect()
}

pub fn read_leaderboard(path: &Path) -> Result<Vec<LeaderboardRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_leaderboard(&text)
}

/// Rank rows by private score, then public score, then name.
pub fn rank_leaderboard(rows: &[LeaderboardRow]) -> Result<Vec<LeaderboardRow>> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(0.0..=1.0).contains(&r.public) || !(0.0..=1.0).contains(&r.private))
        .map(|r| format!("{} has a score outside [0, 1]", r.name))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        b.private
            .total_cmp(&a.private)
            .then(b.public.total_cmp(&a.public))
            .then(a.name.cmp(&b.name))
    });
    Ok(sorted)
}

/// Fixed-width table with five-decimal scores.
pub fn render_leaderboard(rows: &[LeaderboardRow]) -> Result<String> {
    let sorted = rank_leaderboard(rows)?;
    let width = sorted
        .iter()
        .map(|r| r.name.chars().count())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<width$}  {:>7}  {:>7}", "Rank", "Method", "Public", "Private");
    for (i, r) in sorted.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>7.5}  {:>7.5}",
            i + 1,
            r.name,
            r.public,
            r.private
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(pairs: &[(&str, EarCategory)]) -> Vec<SubmissionRow> {
        pairs
            .iter()
            .map(|(id, c)| SubmissionRow {
                video_id: id.to_string(),
                predicted: *c,
            })
            .collect()
    }

    fn truth(pairs: &[(&str, EarCategory)]) -> GroundTruth {
        pairs.iter().map(|(id, c)| (id.to_string(), *c)).collect()
    }

    use EarCategory::*;

    #[test]
    fn fixtures() {
        let t = truth(&[("a", Eating), ("b", Hygiene), ("c", Leisure), ("d", Locomotion)]);
        assert_eq!(score(&rows(&[("a", Eating), ("b", Hygiene), ("c", Leisure), ("d", Locomotion)]), &t).unwrap().value(), 1.0);
        assert_eq!(score(&rows(&[("a", Eating), ("b", Hygiene), ("c", Leisure), ("d", Eating)]), &t).unwrap().value(), 0.75);
    }

    #[test]
    fn validation_lists_offenders() {
        let t = truth(&[("a", Eating), ("b", Hygiene)]);
        let err = score(&rows(&[("a", Eating), ("a", Eating), ("z", Eating)]), &t).unwrap_err();
        let Error::Validation(msgs) = err else { panic!("expected validation error") };
        let all = msgs.join("\n");
        assert!(all.contains("duplicate predictions: a"));
        assert!(all.contains("not in ground truth: z"));
        assert!(all.contains("without a prediction: b"));
    }

    #[test]
    fn split_balance_and_order_independence() {
        let ids: Vec<String> = (0..101).map(|i| format!("vid{i:04}")).collect();
        let a = SplitAssignment::new(ids.iter().map(String::as_str), 3);
        let b = SplitAssignment::new(ids.iter().rev().map(String::as_str), 3);
        assert_eq!(a, b);
        let diff = a.count(Half::Public) as i64 - a.count(Half::Private) as i64;
        assert!(diff.abs() <= 1);
        let c = SplitAssignment::new(ids.iter().map(String::as_str), 4);
        assert_ne!(a, c);
    }

    #[test]
    fn leaderboard_ties() {
        let rows = vec![
            LeaderboardRow { name: "b".into(), public: 0.5, private: 0.7 },
            LeaderboardRow { name: "a".into(), public: 0.5, private: 0.7 },
            LeaderboardRow { name: "c".into(), public: 0.6, private: 0.7 },
        ];
        let ranked = rank_leaderboard(&rows).unwrap();
        let names: Vec<_> = ranked.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, vec!["c", "a", "b"]);
    }

    #[test]
    fn empty_leaderboard_is_header_only() {
        let t = render_leaderboard(&[]).unwrap();
        assert_eq!(t.lines().count(), 1);
        assert!(t.starts_with("Rank  Method"));
    }

    #[test]
    fn out_of_range_score_rejected() {
        let rows = vec![LeaderboardRow { name: "x".into(), public: 1.2, private: 0.1 }];
        assert!(matches!(render_leaderboard(&rows), Err(Error::Validation(_))));
        let rows = vec![LeaderboardRow { name: "x".into(), public: f64::NAN, private: 0.1 }];
        assert!(render_leaderboard(&rows).is_err());
    }

    #[test]
    fn submission_format_is_canonical() {
        let r = rows(&[("b", Eating), ("a", Leisure)]);
        assert_eq!(format_submission(&r).unwrap(), "video_id,predicted\na,leisure\nb,eating\n");
        assert!(format_submission(&rows(&[("a,b", Eating)])).is_err());
    }

    #[test]
    fn confusion_counts() {
        let t = truth(&[("a", Eating), ("b", Eating), ("c", Leisure)]);
        let m = confusion_matrix(&rows(&[("a", Eating), ("b", Leisure), ("c", Leisure)]), &t).unwrap();
        assert_eq!(m[Eating.index()][Eating.index()], 1);
        assert_eq!(m[Eating.index()][Leisure.index()], 1);
        assert_eq!(m[Leisure.index()][Leisure.index()], 1);
    }
}
