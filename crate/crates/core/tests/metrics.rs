use std::collections::HashSet;

use mfu_core::metrics::{bit_dice, dice, union_dice, EvalReport, MeanStd, SliceScores, REPORT_COLUMNS};
use proptest::prelude::*;

fn set_dice(p: &HashSet<usize>, t: &HashSet<usize>) -> f64 {
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(t).count() as f64 / (p.len() + t.len()) as f64
}

#[test]
fn dice_of_identical_and_disjoint_masks() {
    let a = [0, 1, 1, 2, 0, 1];
    assert_eq!(dice(&a, &a, 1), 1.0);
    let b = [1, 0, 0, 2, 1, 0];
    assert_eq!(dice(&a, &b, 1), 0.0);
}

#[test]
fn dice_of_a_hand_counted_overlap() {
    // Prediction {0, 1, 2}, target {1, 2, 3, 4}.
    let pred = [1, 1, 1, 0, 0, 0];
    let target = [0, 1, 1, 1, 1, 0];
    assert!((dice(&pred, &target, 1) - 4.0 / 7.0).abs() < 1e-15);
}

#[test]
fn dice_empty_set_conventions() {
    assert_eq!(dice(&[0, 0], &[0, 0], 3), 1.0);
    assert_eq!(dice(&[3, 0], &[0, 0], 3), 0.0);
    assert_eq!(dice(&[0, 0], &[0, 3], 3), 0.0);
}

#[test]
fn union_dice_cases() {
    assert_eq!(union_dice(&[0, 0, 0], &[0, 0, 0]), 1.0);
    // Every edema pixel predicted as infarct on the right support.
    let target = [0, 2, 2, 1, 0];
    let pred = [0, 1, 1, 1, 0];
    assert_eq!(union_dice(&pred, &target), 1.0);
    assert!(bit_dice(&pred, &target, 1) < 1.0);
    assert_eq!(bit_dice(&pred, &target, 2), 0.0);
}

proptest! {
    #[test]
    fn dice_matches_the_set_oracle(pairs in prop::collection::vec((0u8..4, 0u8..4), 0..60), class in 0u8..4) {
        let (pred, target): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let ps: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
        let ts: HashSet<usize> = (0..target.len()).filter(|&i| target[i] == class).collect();
        prop_assert!((dice(&pred, &target, class) - set_dice(&ps, &ts)).abs() < 1e-15);
        prop_assert_eq!(dice(&pred, &target, class), dice(&target, &pred, class));
    }

    #[test]
    fn union_dice_matches_the_set_oracle(pairs in prop::collection::vec((0u8..4, 0u8..4), 0..60)) {
        let (pred, target): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let ps: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] != 0).collect();
        let ts: HashSet<usize> = (0..target.len()).filter(|&i| target[i] != 0).collect();
        prop_assert!((union_dice(&pred, &target) - set_dice(&ps, &ts)).abs() < 1e-15);
    }

    #[test]
    fn dice_ignores_relabelling_of_other_classes(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60)) {
        let (pred, target): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        // Swap labels 2 and 3, leaving class 1 alone.
        let swap = |v: &[u8]| v.iter().map(|&l| match l { 2 => 3, 3 => 2, x => x }).collect::<Vec<u8>>();
        prop_assert_eq!(dice(&pred, &target, 1), dice(&swap(&pred), &swap(&target), 1));
    }
}

fn scores() -> Vec<SliceScores> {
    let y_ana = [0, 1, 1, 2, 3, 3];
    let y_pat = [0, 1, 2, 0, 0, 0];
    vec![
        SliceScores::compute("case000", "s00", &y_ana, &y_pat, &y_ana, &y_pat),
        SliceScores::compute("case000", "s01", &[0, 1, 0, 2, 3, 0], &[0, 1, 0, 0, 0, 0], &y_ana, &y_pat),
    ]
}

#[test]
fn slice_scores_and_their_summary() {
    let s = scores();
    assert_eq!(s[0].per_class(), [1.0; 5]);
    assert_eq!(s[0].dice_loss(), 0.0);
    assert!((s[1].myo - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(s[1].infarct, 1.0);
    assert_eq!(s[1].edema, 0.0);
    assert_eq!(s[1].avg_pathology, 0.5);
    let report = EvalReport::new(s);
    let m = report.summary("rv");
    assert!((m.mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((m.std - 1.0 / 6.0).abs() < 1e-15);
    assert!(report.mean_dice_loss() > 0.0);
}

#[test]
fn mean_std_is_the_population_statistic() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean, 2.5);
    assert!((m.std - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[]), MeanStd { mean: 0.0, std: 0.0 });
}

#[test]
fn reports_render_as_tables_and_records() {
    let report = EvalReport::new(scores());
    let tsv = report.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split('\t').count(), 2 + REPORT_COLUMNS.len());
    assert!(lines[1].starts_with("case000\ts00\t1.000000"));
    assert!(lines[3].starts_with("all\tmean±std\t"));
    let jsonl = report.to_jsonl();
    let parsed: Vec<SliceScores> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, report.slices);
}
