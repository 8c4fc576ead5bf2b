//! Finite-difference suites over every tape primitive and the full model,
//! evaluated at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{focal_loss, tversky_loss, LossConfig};
use crate::model::{max_fuse, MfuNet, ModelConfig};
use crate::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor::{ConvGeom, NdTensor, Tape, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdTensor<f64> {
    NdTensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `[lo, hi]` kept at least `gap` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64) -> NdTensor<f64> {
    NdTensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if (v - kink).abs() > gap {
            break v;
        }
    })
}

type Op = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    op: Op,
    inputs: Vec<NdTensor<f64>>,
}

fn case(name: &'static str, inputs: Vec<NdTensor<f64>>, op: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        op: Box::new(op),
        inputs,
    }
}

/// Checks every primitive of the tape, and the two losses, against central
/// differences. Each case reduces its output with a fixed random weighting.
pub fn primitive_checks(seed: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m = [3, 4];
    let img = [2, 2, 5, 5];
    let mut cases = vec![
        case("add", vec![random(r, &m, -2.0, 2.0), random(r, &m, -2.0, 2.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![random(r, &m, -2.0, 2.0), random(r, &m, -2.0, 2.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![random(r, &m, -2.0, 2.0), random(r, &m, -2.0, 2.0)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![random(r, &m, -2.0, 2.0), random(r, &m, 0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        case("mul_scalar", vec![random(r, &m, -2.0, 2.0), random(r, &[1], 0.5, 2.0)], |t, v| t.mul(v[0], v[1])),
        case("relu", vec![away_from(r, &m, -2.0, 2.0, 0.0, 0.05)], |t, v| t.relu(v[0])),
        case("leaky_relu", vec![away_from(r, &m, -2.0, 2.0, 0.0, 0.05)], |t, v| t.leaky_relu(v[0], 0.2)),
        case("exp", vec![random(r, &m, -2.0, 2.0)], |t, v| t.exp(v[0])),
        case("log", vec![random(r, &m, 0.2, 3.0)], |t, v| t.log(v[0])),
        case("powf", vec![random(r, &m, 0.2, 3.0)], |t, v| t.powf(v[0], 2.5)),
        case("affine", vec![random(r, &m, -2.0, 2.0)], |t, v| t.affine(v[0], -1.5, 0.25)),
        case("clamp", vec![away_from(r, &m, -2.0, 2.0, 1.0, 0.05)], |t, v| t.clamp(v[0], -5.0, 1.0)),
        case("sum", vec![random(r, &m, -1.0, 1.0)], |t, v| t.sum(t.exp(v[0])?)),
        case("reshape", vec![random(r, &m, -1.0, 1.0)], |t, v| t.exp(t.reshape(v[0], [4, 3])?)),
        case("concat", vec![random(r, &m, -1.0, 1.0), random(r, &[3, 2], -1.0, 1.0)], |t, v| {
            t.exp(t.concat(&[v[0], v[1]], 1)?)
        }),
        case("narrow", vec![random(r, &m, -1.0, 1.0)], |t, v| t.exp(t.narrow(v[0], 1, 1, 2)?)),
        case("softmax", vec![random(r, &[2, 3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        case("custom_unary", vec![random(r, &m, 0.1, 1.4)], |t, v| {
            t.custom_unary(v[0], f64::sin, |x, _| x.cos())
        }),
        case("conv2d", vec![random(r, &img, -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(1, 1, 1))
        }),
        case("conv2d_stride2", vec![random(r, &img, -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
            t.conv2d(v[0], v[1], None, ConvGeom::new(2, 1, 1))
        }),
        case("conv2d_dilated", vec![random(r, &img, -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
            t.conv2d(v[0], v[1], None, ConvGeom::new(1, 2, 2))
        }),
        case(
            "conv_transpose2d",
            vec![random(r, &[2, 3, 3, 4], -1.0, 1.0), random(r, &[3, 2, 2, 2], -1.0, 1.0), random(r, &[2], -1.0, 1.0)],
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 0, 1)),
        ),
        case(
            "instance_norm",
            vec![random(r, &[2, 2, 3, 3], -1.0, 1.0), random(r, &[2], 0.5, 1.5), random(r, &[2], -0.5, 0.5)],
            |t, v| t.exp(t.instance_norm(v[0], v[1], v[2], 1e-5)?),
        ),
    ];
    for (name, ta, tb) in [("bmm", false, false), ("bmm_ta", true, false), ("bmm_tb", false, true), ("bmm_tatb", true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        cases.push(case(name, vec![random(r, &sa, -1.0, 1.0), random(r, &sb, -1.0, 1.0)], move |t, v| {
            t.bmm(v[0], v[1], ta, tb)
        }));
    }
    // Distinct operands so that no two maxima tie within the step.
    let base = random(r, &m, -1.0, 1.0);
    let shifted = |d: f64| NdTensor::from_fn(m.to_vec(), |i| base.data()[i] + d * (((i * 7 + 3) % 5) as f64 + 1.0));
    cases.push(case("max", vec![shifted(0.0), shifted(0.1)], |t, v| t.max(v[0], v[1])));
    cases.push(case("max_fuse", vec![shifted(0.0), shifted(0.1), shifted(-0.13)], |t, v| max_fuse(t, v[0], v[1], v[2])));

    let loss = LossConfig::default();
    let target = NdTensor::from_fn([2, 1, 4, 4], |i| f64::from(u8::from((i * 5) % 7 < 3)));
    let (tv_target, fo_target, tv_cfg, fo_cfg) = (target.clone(), target, loss.clone(), loss);
    cases.push(case("tversky", vec![random(r, &[2, 1, 4, 4], 0.05, 0.95)], move |t, v| {
        tversky_loss(t, v[0], t.leaf(&tv_target)?, &tv_cfg)
    }));
    cases.push(case("focal", vec![random(r, &[2, 1, 4, 4], 0.05, 0.95)], move |t, v| {
        focal_loss(t, v[0], t.leaf(&fo_target)?, &fo_cfg)
    }));

    cases
        .into_iter()
        .map(|c| {
            let weights = {
                let probe = Tape::new();
                let vars = c.inputs.iter().map(|x| probe.leaf(x)).collect::<Result<Vec<_>>>()?;
                let shape = probe.shape((c.op)(&probe, &vars)?);
                random(r, &shape, 0.5, 1.5)
            };
            let op = c.op;
            let report = finite_diff_check(move |t, v| t.sum(t.mul(op(t, v)?, t.leaf(&weights)?)?), &c.inputs, STEP)?;
            Ok(CheckOutcome {
                name: c.name.to_string(),
                report,
                tolerance,
            })
        })
        .collect()
}

/// Checks the gradient of a random weighting of both heads with respect to
/// every model parameter, and separately with respect to the three inputs.
pub fn model_check(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut model = MfuNet::<f64>::new(ModelConfig {
        init_seed: seed,
        ..config.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if let Some(att) = model.attention_block() {
        // A nonzero scale so that the attention branch contributes.
        let scale = att.scale;
        model.params_mut().get_mut(scale).data_mut()[0] = 0.5;
    }
    let s = config.image_size;
    let inputs: Vec<NdTensor<f64>> = (0..3).map(|_| random(&mut rng, &[1, 1, s, s], 0.0, 1.0)).collect();
    let wa = random(&mut rng, &[1, config.n_anatomy + 1, s, s], -1.0, 1.0);
    let wp = random(&mut rng, &[1, config.n_pathology + 1, s, s], -1.0, 1.0);
    let objective = |f: &crate::nn::Forward<'_, f64>, model: &MfuNet<f64>, x: [Var; 3]| -> Result<Var> {
        let out = model.forward(f, x)?;
        let t = f.tape;
        let a = t.sum(t.mul(out.anatomy, t.leaf(&wa)?)?)?;
        let p = t.sum(t.mul(out.pathology, t.leaf(&wp)?)?)?;
        t.add(a, p)
    };
    let frozen = model.clone();
    let params = model.params_mut().finite_diff_check(
        |f| {
            let x = [f.tape.leaf(&inputs[0])?, f.tape.leaf(&inputs[1])?, f.tape.leaf(&inputs[2])?];
            objective(f, &frozen, x)
        },
        1e-6,
    )?;
    let inputs_report = finite_diff_check(
        |t, v| {
            let f = crate::nn::Forward::new(t, frozen.params(), false);
            objective(&f, &frozen, [v[0], v[1], v[2]])
        },
        &inputs,
        1e-6,
    )?;
    Ok(vec![
        CheckOutcome {
            name: "model parameters".into(),
            report: params,
            tolerance,
        },
        CheckOutcome {
            name: "model inputs".into(),
            report: inputs_report,
            tolerance,
        },
    ])
}

/// A primitive whose backward is deliberately wrong (`x` instead of `2x`);
/// a working checker must reject it.
pub fn wrong_backward_check(tolerance: f64) -> Result<CheckOutcome> {
    let x = NdTensor::new([4], vec![0.5, 1.0, 1.5, 2.0])?;
    let report = finite_diff_check(|t, v| t.sum(t.custom_unary(v[0], |x| x * x, |x, _| x)?), &[x], STEP)?;
    Ok(CheckOutcome {
        name: "wrong backward".into(),
        report,
        tolerance,
    })
}
