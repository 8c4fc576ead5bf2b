use mfu_core::loss::{focal_loss, pathology_member, total_loss, tversky_loss, LossConfig, TERM_NAMES};
use mfu_core::model::SegOutput;
use mfu_core::tensor::gradcheck::finite_diff_check;
use mfu_core::tensor::{NdTensor, Tape, Var};
use mfu_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tversky_oracle(p: &[f64], y: &[f64], beta: f64, eps: f64) -> f64 {
    let tp: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let fp: f64 = p.iter().zip(y).map(|(a, b)| a - a * b).sum();
    let fn_: f64 = p.iter().zip(y).map(|(a, b)| b - a * b).sum();
    1.0 - tp / (tp + (1.0 - beta) * fp + beta * fn_ + eps)
}

fn focal_oracle(p: &[f64], y: &[f64], batch: usize, gamma: f64, eps: f64) -> f64 {
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let q = pi.clamp(eps, 1.0 - eps);
        total += -yi * (1.0 - q).powf(gamma) * q.ln();
    }
    total / batch as f64
}

fn soft_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let y = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (p, y)
}

fn eval(loss: fn(&Tape<f64>, Var, Var, &LossConfig) -> mfu_core::Result<Var>, p: &[f64], y: &[f64], shape: &[usize], cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    let pv = tape.constant(shape.to_vec(), p.to_vec()).unwrap();
    let yv = tape.constant(shape.to_vec(), y.to_vec()).unwrap();
    tape.item(loss(&tape, pv, yv, cfg).unwrap())
}

#[test]
fn tversky_matches_the_formula() {
    let cfg = LossConfig::default();
    let (p, y) = soft_instance(1, 64);
    let got = eval(tversky_loss, &p, &y, &[8, 8], &cfg);
    assert!((got - tversky_oracle(&p, &y, 0.7, cfg.smooth_eps)).abs() < 1e-10);
}

#[test]
fn tversky_perfect_and_total_miss() {
    let cfg = LossConfig::default();
    let y: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let perfect = eval(tversky_loss, &y, &y, &[1, 1, 8, 8], &cfg);
    assert!((0.0..=1e-5).contains(&perfect), "{perfect}");
    let inverse: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    assert!((eval(tversky_loss, &inverse, &y, &[1, 1, 8, 8], &cfg) - 1.0).abs() < 1e-12);
}

#[test]
fn literal_denominator_halves_the_perfect_index() {
    let cfg = LossConfig {
        literal_tversky: true,
        ..LossConfig::default()
    };
    let y: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 6))).collect();
    let loss = eval(tversky_loss, &y, &y, &[4, 4], &cfg);
    assert!((loss - 0.5).abs() < 1e-6, "{loss}");
}

#[test]
fn focal_matches_the_formula() {
    let cfg = LossConfig::default();
    let (p, y) = soft_instance(2, 2 * 36);
    let got = eval(focal_loss, &p, &y, &[2, 1, 6, 6], &cfg);
    assert!((got - focal_oracle(&p, &y, 2, 2.0, cfg.smooth_eps)).abs() < 1e-10);
}

#[test]
fn focal_is_zero_when_targets_are_certain() {
    let cfg = LossConfig::default();
    let y: Vec<f64> = (0..36).map(|i| f64::from(u8::from(i % 4 == 0))).collect();
    let p: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.3 }).collect();
    let loss = eval(focal_loss, &p, &y, &[1, 1, 6, 6], &cfg);
    assert!((0.0..1e-12).contains(&loss), "{loss}");
}

#[test]
fn focal_without_modulation_is_masked_cross_entropy() {
    let cfg = LossConfig {
        gamma: 0.0,
        ..LossConfig::default()
    };
    let (p, y) = soft_instance(3, 3 * 16);
    let ce: f64 = p.iter().zip(&y).map(|(pi, yi)| -yi * pi.ln()).sum::<f64>() / 3.0;
    assert!((eval(focal_loss, &p, &y, &[3, 1, 4, 4], &cfg) - ce).abs() < 1e-8);
}

#[test]
fn losses_reject_invalid_inputs() {
    let cfg = LossConfig::default();
    let tape = Tape::<f64>::new();
    let good = tape.constant([2], vec![0.2, 0.8]).unwrap();
    let target = tape.constant([2], vec![0.0, 1.0]).unwrap();
    let above = tape.constant([2], vec![0.2, 1.5]).unwrap();
    let soft_target = tape.constant([2], vec![0.0, 0.5]).unwrap();
    let short = tape.constant([1], vec![1.0]).unwrap();
    for loss in [tversky_loss::<f64>, focal_loss::<f64>] {
        assert!(matches!(loss(&tape, above, target, &cfg).unwrap_err(), Error::Domain { .. }));
        assert!(matches!(loss(&tape, good, soft_target, &cfg).unwrap_err(), Error::Domain { .. }));
        assert!(matches!(loss(&tape, good, short, &cfg).unwrap_err(), Error::Shape { .. }));
    }
    assert!(LossConfig { beta: 1.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { lambda_edema: -1.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { smooth_eps: 0.0, ..LossConfig::default() }.validate().is_err());
}

#[test]
fn beta_weighs_false_negatives_against_false_positives() {
    // Swapping prediction and target turns three misses into three extras.
    let large: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i < 10))).collect();
    let small: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i < 7))).collect();
    let mut previous_ratio = 0.0;
    for beta in [0.3, 0.5, 0.7] {
        let cfg = LossConfig {
            beta,
            ..LossConfig::default()
        };
        let l_fn = eval(tversky_loss, &small, &large, &[20], &cfg);
        let l_fp = eval(tversky_loss, &large, &small, &[20], &cfg);
        let ratio = l_fn / l_fp;
        assert!(ratio > previous_ratio, "beta {beta}: {ratio} after {previous_ratio}");
        match beta {
            b if b > 0.5 => assert!(l_fn > l_fp),
            b if b < 0.5 => assert!(l_fn < l_fp),
            _ => assert!((l_fn - l_fp).abs() < 1e-12),
        }
        previous_ratio = ratio;
    }
}

proptest! {
    #[test]
    fn losses_are_bounded_and_improve_toward_the_target(seed in any::<u64>(), n in 4usize..40) {
        let cfg = LossConfig::default();
        let (p, y) = soft_instance(seed, n);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for step in 0..=10 {
            let t = f64::from(step) / 10.0;
            let q: Vec<f64> = p.iter().zip(&y).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let lt = eval(tversky_loss, &q, &y, &[n], &cfg);
            let lf = eval(focal_loss, &q, &y, &[1, n], &cfg);
            prop_assert!((0.0..=1.0).contains(&lt));
            prop_assert!(lf >= 0.0);
            prop_assert!(lt <= last.0 + 1e-12 && lf <= last.1 + 1e-12);
            last = (lt, lf);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = LossConfig::default();
    for seed in 0..4 {
        let (p, y) = soft_instance(10 + seed, 64);
        let target = NdTensor::new([1, 1, 8, 8], y).unwrap();
        let point = [NdTensor::new([1, 1, 8, 8], p).unwrap()];
        let t1 = target.clone();
        let cfg1 = cfg.clone();
        let tv = finite_diff_check(move |t, v| tversky_loss(t, v[0], t.leaf(&t1)?, &cfg1), &point, 1e-6).unwrap();
        assert!(tv.max_rel_error < 1e-4, "tversky: {tv:?}");
        let cfg2 = cfg.clone();
        let fo = finite_diff_check(move |t, v| focal_loss(t, v[0], t.leaf(&target)?, &cfg2), &point, 1e-6).unwrap();
        assert!(fo.max_rel_error < 1e-4, "focal: {fo:?}");
    }
}

/// Logit leaves and their softmax heads for a `[B, H, W]` batch.
fn heads(tape: &Tape<f64>, ana: &NdTensor<f64>, pat: &NdTensor<f64>) -> (Var, Var, SegOutput) {
    let a = tape.leaf(&ana.clone().with_requires_grad(true)).unwrap();
    let p = tape.leaf(&pat.clone().with_requires_grad(true)).unwrap();
    let out = SegOutput {
        anatomy: tape.softmax(a, 1).unwrap(),
        pathology: tape.softmax(p, 1).unwrap(),
        attention: None,
        attention_grid: None,
    };
    (a, p, out)
}

fn labels(seed: u64, n: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ana = (0..n).map(|_| rng.random_range(0..4u8)).collect();
    let pat = (0..n).map(|_| [0u8, 0, 1, 2, 3][rng.random_range(0..5)]).collect();
    (ana, pat)
}

/// Logits that put almost all mass on the labelled class.
fn confident_logits(codes: &[u8], classes: usize, b: usize, plane: usize, class_of: impl Fn(u8) -> usize) -> NdTensor<f64> {
    NdTensor::from_fn([b, classes, plane, 1], |i| {
        let (bi, c, px) = (i / (classes * plane), (i / plane) % classes, i % plane);
        if class_of(codes[bi * plane + px]) == c {
            40.0
        } else {
            0.0
        }
    })
}

fn pathology_class(bits: u8) -> usize {
    (0..3).find(|&c| pathology_member(c as u8)(bits)).unwrap()
}

#[test]
fn perfect_heads_give_zero_total_loss() {
    let (b, plane) = (2, 30);
    let (ana, pat) = labels(4, b * plane);
    let tape = Tape::new();
    let (_, _, out) = heads(
        &tape,
        &confident_logits(&ana, 4, b, plane, |c| c as usize),
        &confident_logits(&pat, 3, b, plane, pathology_class),
    );
    let loss = total_loss(&tape, &out, &ana, &pat, &LossConfig::default()).unwrap();
    assert!(tape.item(loss.total) < 1e-5, "{}", tape.item(loss.total));
    assert_eq!(loss.terms.len(), TERM_NAMES.len());
}

#[test]
fn overlapping_bits_count_as_infarct_only() {
    assert!(pathology_member(1)(3) && !pathology_member(2)(3));
    assert!(pathology_member(2)(2) && !pathology_member(1)(2));
    assert!(pathology_member(0)(0) && !pathology_member(0)(1));
}

fn loss_and_grads(cfg: &LossConfig, ana_logits: &NdTensor<f64>, pat_logits: &NdTensor<f64>, ana: &[u8], pat: &[u8]) -> (f64, Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let (a, p, out) = heads(&tape, ana_logits, pat_logits);
    let loss = total_loss(&tape, &out, ana, pat, cfg).unwrap();
    let g = tape.backward(loss.total).unwrap();
    (tape.item(loss.total), g.wrt(a).unwrap().to_vec(), g.wrt(p).map(<[f64]>::to_vec).unwrap_or_default())
}

#[test]
fn scaling_every_weight_scales_the_loss_and_keeps_the_direction() {
    let (b, plane) = (2, 25);
    let (ana, pat) = labels(5, b * plane);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let la = NdTensor::from_fn([b, 4, plane, 1], |_| rng.random_range(-2.0..2.0));
    let lp = NdTensor::from_fn([b, 3, plane, 1], |_| rng.random_range(-2.0..2.0));
    let base = LossConfig::default();
    let (l1, ga1, gp1) = loss_and_grads(&base, &la, &lp, &ana, &pat);
    for c in [0.5, 3.0] {
        let (lc, gac, gpc) = loss_and_grads(&base.scaled(c), &la, &lp, &ana, &pat);
        assert!((lc - c * l1).abs() < 1e-10 * lc.abs().max(1.0));
        for (x, y) in ga1.iter().chain(&gp1).zip(gac.iter().chain(&gpc)) {
            assert!((y - c * x).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_pathology_weights_leave_the_pathology_head_untouched() {
    let (b, plane) = (1, 36);
    let (ana, pat) = labels(7, b * plane);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let la = NdTensor::from_fn([b, 4, plane, 1], |_| rng.random_range(-2.0..2.0));
    let lp = NdTensor::from_fn([b, 3, plane, 1], |_| rng.random_range(-2.0..2.0));
    let cfg = LossConfig {
        lambda_infarct: 0.0,
        lambda_edema: 0.0,
        ..LossConfig::default()
    };
    let (_, ga, gp) = loss_and_grads(&cfg, &la, &lp, &ana, &pat);
    assert!(gp.iter().all(|v| v.abs() < 1e-12));
    assert!(ga.iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn total_loss_checks_mask_and_channel_counts() {
    let tape = Tape::new();
    let la = NdTensor::zeros(vec![1, 4, 3, 3]);
    let lp = NdTensor::zeros(vec![1, 3, 3, 3]);
    let (_, _, out) = heads(&tape, &la, &lp);
    let cfg = LossConfig::default();
    assert!(total_loss(&tape, &out, &[0; 8], &[0; 9], &cfg).is_err());
    let swapped = SegOutput {
        anatomy: out.pathology,
        pathology: out.anatomy,
        ..out
    };
    assert!(matches!(total_loss(&tape, &swapped, &[0; 9], &[0; 9], &cfg).unwrap_err(), Error::Shape { .. }));
}
