//! Tversky and focal objectives for the anatomy and pathology heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegOutput;
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_anatomy: f64,
    pub lambda_infarct: f64,
    pub lambda_edema: f64,
    pub smooth_eps: f64,
    /// Use the denominator exactly as printed, `S(p) + S(y) + (1-b) FP + b FN`.
    /// A perfect prediction then scores an index of 0.5.
    pub literal_tversky: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.7,
            gamma: 2.0,
            lambda_anatomy: 1.0,
            lambda_infarct: 3.0,
            lambda_edema: 5.0,
            smooth_eps: 1e-6,
            literal_tversky: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, v) in [
            ("lambda_anatomy", self.lambda_anatomy),
            ("lambda_infarct", self.lambda_infarct),
            ("lambda_edema", self.lambda_edema),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps < 0.5) {
            return Err(Error::Config(format!("smooth_eps must lie in (0, 0.5), got {}", self.smooth_eps)));
        }
        Ok(())
    }

    /// Same configuration with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        LossConfig {
            lambda_anatomy: self.lambda_anatomy * c,
            lambda_infarct: self.lambda_infarct * c,
            lambda_edema: self.lambda_edema * c,
            ..self.clone()
        }
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, op: &'static str, pred: Var, target: Var) -> Result<()> {
    let (sp, st) = (tape.shape(pred), tape.shape(target));
    if sp != st {
        return Err(Error::shape(op, format!("prediction {sp:?} vs target {st:?}")));
    }
    if let Some(v) = tape.data(pred).iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Domain {
            op,
            detail: format!("prediction {v} outside [0, 1]"),
        });
    }
    if let Some(v) = tape.data(target).iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::Domain {
            op,
            detail: format!("target {v} is not binary"),
        });
    }
    Ok(())
}

/// `1 - TI` with `TI = TP / (TP + (1 - b) FP + b FN + eps)`; sums run over the
/// whole batch.
pub fn tversky_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, "tversky_loss", pred, target)?;
    let beta = T::of(cfg.beta);
    let tp = tape.sum(tape.mul(pred, target)?)?;
    let sp = tape.sum(pred)?;
    let sy = tape.sum(target)?;
    let fp = tape.sub(sp, tp)?;
    let fn_ = tape.sub(sy, tp)?;
    let weighted = tape.add(
        tape.affine(fp, T::one() - beta, T::zero())?,
        tape.affine(fn_, beta, T::zero())?,
    )?;
    let head = if cfg.literal_tversky { tape.add(sp, sy)? } else { tp };
    let denom = tape.affine(tape.add(head, weighted)?, T::one(), T::of(cfg.smooth_eps))?;
    let ti = tape.div(tp, denom)?;
    tape.affine(ti, -T::one(), T::one())
}

/// `sum_{H,W} -y (1 - p)^g log p` with `p` clamped to `[eps, 1 - eps]`,
/// averaged over the batch (leading axis).
pub fn focal_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, "focal_loss", pred, target)?;
    let batch = tape.shape(pred).first().copied().unwrap_or(1).max(1);
    let eps = T::of(cfg.smooth_eps);
    let p = tape.clamp(pred, eps, T::one() - eps)?;
    let log_p = tape.log(p)?;
    let one_minus = tape.affine(p, -T::one(), T::one())?;
    let modulated = if cfg.gamma == 0.0 {
        log_p
    } else {
        tape.mul(tape.powf(one_minus, T::of(cfg.gamma))?, log_p)?
    };
    let masked = tape.sum(tape.mul(modulated, target)?)?;
    tape.affine(masked, -T::one() / T::of(batch as f64), T::zero())
}

/// Names of the weighted foreground terms, in breakdown order.
pub const TERM_NAMES: [&str; 5] = ["myo", "lv", "rv", "infarct", "edema"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub tversky: f64,
    pub focal: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    /// Unweighted loss values per foreground class, in [`TERM_NAMES`] order.
    pub terms: Vec<TermValue>,
}

impl LossBreakdown {
    pub fn weighted(&self, i: usize) -> f64 {
        let t = &self.terms[i];
        t.weight * (t.tversky + t.focal)
    }
}

/// Binary `[B, 1, H, W]` target for one class of a label batch.
pub fn class_mask<T: Scalar>(labels: &[u8], member: impl Fn(u8) -> bool) -> Vec<T> {
    labels.iter().map(|&l| if member(l) { T::one() } else { T::zero() }).collect()
}

/// Anatomy codes `{1, 2, 3}` map to channels 1..=3 of the anatomy head.
pub fn anatomy_member(class: u8) -> impl Fn(u8) -> bool {
    move |l| l == class
}

/// Pathology channel 1 is infarct (bit 1); channel 2 is edema (bit 2) not
/// already marked as infarct.
pub fn pathology_member(channel: u8) -> impl Fn(u8) -> bool {
    move |l| match channel {
        1 => l & 1 != 0,
        2 => l & 2 != 0 && l & 1 == 0,
        _ => l & 3 == 0,
    }
}

/// Weighted sum of tversky + focal over the five foreground channels.
///
/// `y_ana` holds anatomy codes and `y_pat` pathology bit flags, both laid out
/// as `[B, H, W]`.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    output: &SegOutput,
    y_ana: &[u8],
    y_pat: &[u8],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let sa = tape.shape(output.anatomy);
    let sp = tape.shape(output.pathology);
    if sa.len() != 4 || sa[1] != 4 || sp.len() != 4 || sp[1] != 3 {
        return Err(Error::shape(
            "total_loss",
            format!("heads must be [B, 4, H, W] and [B, 3, H, W], got {sa:?} and {sp:?}"),
        ));
    }
    let (b, h, w) = (sa[0], sa[2], sa[3]);
    let plane = b * h * w;
    if y_ana.len() != plane || y_pat.len() != plane || sp[0] != b || sp[2] != h || sp[3] != w {
        return Err(Error::shape(
            "total_loss",
            format!(
                "masks of {} and {} pixels do not match heads {sa:?} / {sp:?}",
                y_ana.len(),
                y_pat.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(5);
    let mut add_term = |head: Var, channel: usize, target: Vec<T>, weight: f64| -> Result<()> {
        let pred = tape.narrow(head, 1, channel, 1)?;
        let target = tape.constant(vec![b, 1, h, w], target)?;
        let lt = tversky_loss(tape, pred, target, cfg)?;
        let lf = focal_loss(tape, pred, target, cfg)?;
        terms.push(TermValue {
            tversky: tape.item(lt).as_f64(),
            focal: tape.item(lf).as_f64(),
            weight,
        });
        let term = tape.affine(tape.add(lt, lf)?, T::of(weight), T::zero())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    for class in 1..=3u8 {
        add_term(
            output.anatomy,
            class as usize,
            class_mask(y_ana, anatomy_member(class)),
            cfg.lambda_anatomy,
        )?;
    }
    add_term(output.pathology, 1, class_mask(y_pat, pathology_member(1)), cfg.lambda_infarct)?;
    add_term(output.pathology, 2, class_mask(y_pat, pathology_member(2)), cfg.lambda_edema)?;
    Ok(LossBreakdown {
        total: total.expect("five terms"),
        terms,
    })
}
