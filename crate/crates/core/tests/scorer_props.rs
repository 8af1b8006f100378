mod common;

use ear_tsm::ingest::EarCategory;
use ear_tsm::rng;
use ear_tsm::sampler::CropSpec;
use ear_tsm::scorer::{
    format_submission, parse_leaderboard, predict_all, rank_leaderboard, render_leaderboard, score,
    split_score, FailurePolicy, GroundTruth, Half, SplitAssignment, SubmissionRow, CHALLENGE_LEADERBOARD,
};
use ear_tsm::Error;
use proptest::prelude::*;
use rand::Rng;

fn constructed(n: usize, correct: usize, seed: u64) -> (Vec<SubmissionRow>, GroundTruth) {
    let mut r = rng::substream(seed, "scorer-fixture", &[]);
    let mut truth = GroundTruth::new();
    let mut rows = Vec::new();
    for i in 0..n {
        let id = format!("v{i:05}");
        let label = EarCategory::from_index(r.random_range(0..6)).unwrap();
        let predicted = if i < correct {
            label
        } else {
            EarCategory::from_index((label.index() + r.random_range(1..6)) % 6).unwrap()
        };
        truth.insert(id.clone(), label);
        rows.push(SubmissionRow { video_id: id, predicted });
    }
    (rows, truth)
}

#[test]
fn exact_fractions() {
    let (rows, truth) = constructed(4, 4, 0);
    assert_eq!(score(&rows, &truth).unwrap().value(), 1.0);
    let (rows, truth) = constructed(4, 3, 0);
    assert_eq!(score(&rows, &truth).unwrap().value(), 0.75);
    let (rows, truth) = constructed(2308, 1880, 1);
    let counted = rows.iter().filter(|r| truth[&r.video_id] == r.predicted).count();
    assert_eq!(counted, 1880);
    let acc = score(&rows, &truth).unwrap();
    assert_eq!((acc.correct, acc.total), (1880, 2308));
    assert_eq!(acc.value(), 1880.0 / 2308.0);
    assert!((acc.value() - 0.814558).abs() < 5e-7);
}

#[test]
fn misaligned_submissions_list_offenders() {
    let (mut rows, truth) = constructed(5, 5, 2);
    rows.push(rows[0].clone());
    rows.remove(3);
    match score(&rows, &truth) {
        Err(Error::Validation(p)) => {
            let text = p.join("\n");
            assert!(text.contains("v00000") && text.contains("v00003"), "{text}");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn split_decomposes_overall_accuracy(n in 2usize..1200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let correct = (n as f64 * frac) as usize;
        let (rows, truth) = constructed(n, correct, seed);
        let assignment = SplitAssignment::new(truth.keys().map(String::as_str), seed);
        let (public, private) = split_score(&rows, &truth, &assignment).unwrap();
        let all = score(&rows, &truth).unwrap();
        let weighted = (public.value() * public.total as f64 + private.value() * private.total as f64) / n as f64;
        prop_assert!((weighted - all.value()).abs() < 1e-12);
        prop_assert_eq!(public.total + private.total, n as u64);
        prop_assert!(public.total.abs_diff(private.total) <= 1);
    }

    #[test]
    fn split_ignores_order(n in 1usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let a = SplitAssignment::new(ids.iter().map(String::as_str), seed);
        let b = SplitAssignment::new(ids.iter().rev().map(String::as_str), seed);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn split_of_thousand_ids() {
    let (rows, truth) = constructed(1000, 811, 9);
    let assignment = SplitAssignment::new(truth.keys().map(String::as_str), 0);
    assert_eq!(assignment.count(Half::Public), 500);
    let (p, q) = split_score(&rows, &truth, &assignment).unwrap();
    let overall = score(&rows, &truth).unwrap().value();
    assert!(((p.value() * 500.0 + q.value() * 500.0) / 1000.0 - overall).abs() < 1e-12);
    let perfect: Vec<SubmissionRow> = truth
        .iter()
        .map(|(id, l)| SubmissionRow { video_id: id.clone(), predicted: *l })
        .collect();
    let (p, q) = split_score(&perfect, &truth, &assignment).unwrap();
    assert_eq!((p.value(), q.value()), (1.0, 1.0));
}

#[test]
fn table_fixture_ranks_by_private_score() {
    let ranked = rank_leaderboard(&parse_leaderboard(CHALLENGE_LEADERBOARD).unwrap()).unwrap();
    let names: Vec<&str> = ranked.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["our best", "our submission", "CUHK", "RoboVision", "VisionLab", "CVMI"]);
    assert_eq!((ranked[0].public, ranked[0].private), (0.84272, 0.85051));
    let text = render_leaderboard(&ranked).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.iter().position(|l| l.contains("our best")) < lines.iter().position(|l| l.contains("CUHK")));
    assert!(text.contains("0.85051") && text.contains("0.77859"));
}

fn biased_model(category: EarCategory) -> ear_tsm::net::Model {
    use ear_tsm::nn::Visit;
    let mut model = common::tiny_model(&common::tiny_shift(4), 0.0, 0);
    model.visit_mut("", &mut |name, p| {
        if name == "fc.weight" {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        if name == "fc.bias" {
            p.value.iter_mut().enumerate().for_each(|(i, v)| *v = if i == category.index() { 1.0 } else { 0.0 });
        }
    });
    model
}

#[test]
fn predictions_follow_a_forced_bias() {
    let dir = tempfile::tempdir().unwrap();
    let entries = common::synthetic_manifest(dir.path(), &common::small_synth(1, "S01", 0));
    let model = biased_model(EarCategory::Eating);
    let crop = CropSpec { resize_short_side: 18, crop_size: 12, ..CropSpec::default() };
    let preds = predict_all(&model, &entries[..1], &crop, FailurePolicy::Strict).unwrap();
    assert_eq!(preds.rows[0].predicted, EarCategory::Eating);

    let mut reversed = entries.clone();
    reversed.reverse();
    let a = predict_all(&model, &entries, &crop, FailurePolicy::Strict).unwrap();
    let b = predict_all(&model, &reversed, &crop, FailurePolicy::Strict).unwrap();
    assert_eq!(format_submission(&a.rows).unwrap(), format_submission(&b.rows).unwrap());
}

#[test]
fn lenient_prediction_falls_back_to_majority() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = common::synthetic_manifest(dir.path(), &common::small_synth(1, "S01", 0));
    entries[2].frame_dir = dir.path().join("missing");
    let model = biased_model(EarCategory::Leisure);
    let crop = CropSpec { resize_short_side: 18, crop_size: 12, ..CropSpec::default() };
    assert!(predict_all(&model, &entries, &crop, FailurePolicy::Strict).is_err());
    let preds = predict_all(&model, &entries, &crop, FailurePolicy::Lenient).unwrap();
    assert_eq!(preds.rows.len(), 6);
    assert_eq!(preds.fallbacks.len(), 1);
    assert_eq!(preds.fallbacks[0].0, entries[2].video_id);
    assert!(preds.rows.iter().all(|r| r.predicted == EarCategory::Leisure));
}
