//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays independent
//! of the backward rules it is used to verify.

use super::{Graph, GradError, Tensor, Var};

/// Denominator floor for relative errors; components smaller than this are
/// effectively compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

/// `∂f/∂inputs` by central differences with step `h`.
pub fn fd_gradients(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> f64, h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].len()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let fp = f(&work);
            work[k].data_mut()[j] = x0 - h;
            let fm = f(&work);
            work[k].data_mut()[j] = x0;
            *gj = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Compares tape gradients against central differences.
///
/// `build` constructs a fresh graph from the inputs and returns it with the
/// input handles and the scalar output.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradReport, GradError>
where
    F: Fn(&[Tensor]) -> (Graph, Vec<Var>, Var),
{
    let (mut g, vars, out) = build(inputs);
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let numeric = fd_gradients(
        inputs,
        |xs| {
            let (g, _, out) = build(xs);
            g.value(out).item()
        },
        h,
    );
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradReport {
    let mut report = GradReport::default();
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let rel = relative_error(x, y);
            // f64::max would drop a NaN and hide it
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { report.max_rel_error.max(rel) };
            report.max_abs_error = report.max_abs_error.max((x - y).abs());
            report.checked += 1;
        }
    }
    report
}
