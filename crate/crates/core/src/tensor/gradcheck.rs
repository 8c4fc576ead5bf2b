//! Central finite-difference checks of tape gradients, run at `f64`.

use super::{NdTensor, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub(crate) fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((input, coord));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coordinates += other.coordinates;
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central
/// differences with the given `step`, over every coordinate of every input.
///
/// `f` receives a fresh tape and one leaf per entry of `point`.
pub fn finite_diff_check<F>(f: F, point: &[NdTensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[NdTensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(grad)))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        if tape.shape(out).iter().product::<usize>() != 1 {
            return Err(Error::Usage("finite_diff_check needs a scalar-valued function".into()));
        }
        let value = tape.item(out);
        if !grad {
            return Ok((value, None));
        }
        let grads = tape.backward(out)?;
        let per_input = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, Some(per_input)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut report = GradCheckReport::default();
    let mut work: Vec<NdTensor<f64>> = point.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            report.record(i, j, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
