//! Dice scores and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Dice of two membership masks: `2|P n T| / (|P| + |T|)`, 1 when both are
/// empty.
pub fn dice_masks(pred: impl IntoIterator<Item = bool>, target: impl IntoIterator<Item = bool>) -> f64 {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (p, t) in pred.into_iter().zip(target) {
        np += p as usize;
        nt += t as usize;
        inter += (p && t) as usize;
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

/// Dice of one label code in two discrete label maps.
pub fn dice(pred: &[u8], target: &[u8], class: u8) -> f64 {
    dice_masks(pred.iter().map(|&p| p == class), target.iter().map(|&t| t == class))
}

/// Dice of one pathology bit in two bit-flag maps.
pub fn bit_dice(pred: &[u8], target: &[u8], bit: u8) -> f64 {
    dice_masks(pred.iter().map(|&p| p & bit != 0), target.iter().map(|&t| t & bit != 0))
}

/// Dice of the infarct-or-edema union.
pub fn union_dice(pred: &[u8], target: &[u8]) -> f64 {
    dice_masks(pred.iter().map(|&p| p & 3 != 0), target.iter().map(|&t| t & 3 != 0))
}

/// Pathology-head class index (0 bg, 1 infarct, 2 edema) to bit flags.
pub fn pathology_bits(class: u8) -> u8 {
    match class {
        1 => 1,
        2 => 2,
        _ => 0,
    }
}

pub const CLASS_NAMES: [&str; 5] = ["myo", "lv", "rv", "infarct", "edema"];

/// Scores of one evaluated slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScores {
    pub case_id: String,
    pub slice_id: String,
    pub myo: f64,
    pub lv: f64,
    pub rv: f64,
    pub infarct: f64,
    pub edema: f64,
    pub avg_pathology: f64,
    pub union: f64,
}

impl SliceScores {
    /// `pred_ana`/`y_ana` hold anatomy codes, `pred_pat`/`y_pat` bit flags.
    pub fn compute(case_id: &str, slice_id: &str, pred_ana: &[u8], pred_pat: &[u8], y_ana: &[u8], y_pat: &[u8]) -> Self {
        let infarct = bit_dice(pred_pat, y_pat, 1);
        let edema = bit_dice(pred_pat, y_pat, 2);
        SliceScores {
            case_id: case_id.to_string(),
            slice_id: slice_id.to_string(),
            myo: dice(pred_ana, y_ana, 1),
            lv: dice(pred_ana, y_ana, 2),
            rv: dice(pred_ana, y_ana, 3),
            infarct,
            edema,
            avg_pathology: 0.5 * (infarct + edema),
            union: union_dice(pred_pat, y_pat),
        }
    }

    pub fn per_class(&self) -> [f64; 5] {
        [self.myo, self.lv, self.rv, self.infarct, self.edema]
    }

    /// Score by report column name.
    pub fn value(&self, column: &str) -> Option<f64> {
        Some(match column {
            "myo" => self.myo,
            "lv" => self.lv,
            "rv" => self.rv,
            "infarct" => self.infarct,
            "edema" => self.edema,
            "avg_pathology" => self.avg_pathology,
            "union" => self.union,
            _ => return None,
        })
    }

    pub fn anatomy_mean(&self) -> f64 {
        (self.myo + self.lv + self.rv) / 3.0
    }

    /// `1 - mean` of the five per-class scores.
    pub fn dice_loss(&self) -> f64 {
        1.0 - self.per_class().iter().sum::<f64>() / 5.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; zero for fewer than two values.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slices: Vec<SliceScores>,
}

pub const REPORT_COLUMNS: [&str; 7] = ["myo", "lv", "rv", "infarct", "edema", "avg_pathology", "union"];

impl EvalReport {
    pub fn new(slices: Vec<SliceScores>) -> Self {
        EvalReport { slices }
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        self.slices.iter().filter_map(|s| s.value(name)).collect()
    }

    pub fn summary(&self, name: &str) -> MeanStd {
        MeanStd::of(&self.column(name))
    }

    pub fn mean_dice_loss(&self) -> f64 {
        if self.slices.is_empty() {
            return 1.0;
        }
        self.slices.iter().map(SliceScores::dice_loss).sum::<f64>() / self.slices.len() as f64
    }

    /// Tab-separated table: a header, one row per slice, then a `mean±std`
    /// summary row with scores in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case\tslice");
        for c in REPORT_COLUMNS {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for s in &self.slices {
            let _ = write!(out, "{}\t{}", s.case_id, s.slice_id);
            for v in REPORT_COLUMNS.iter().filter_map(|c| s.value(c)) {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out.push_str("all\tmean±std");
        for c in REPORT_COLUMNS {
            let m = self.summary(c);
            let _ = write!(out, "\t{:.1}±{:.1}", 100.0 * m.mean, 100.0 * m.std);
        }
        out.push('\n');
        out
    }

    /// One JSON object per slice.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.slices {
            out.push_str(&serde_json::to_string(s).expect("scores serialize"));
            out.push('\n');
        }
        out
    }
}
