//! Central finite-difference gradient checking (64-bit only).

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Where the worst entry lives: tensor name and flat index.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&tape, v)?.value().item();
        Ok(out)
    };
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&tape, xv)?;
    let grads = tape.gradients(loss)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.wrt(xv).unwrap_or(&zeros).clone();

    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, analytic.data()[i], (up - down) / (2.0 * eps));
    }
    Ok(report.max_rel_err)
}

/// Check every trainable parameter of `store` (plus optional extra inputs
/// handled inside `f`). `f` builds the scalar loss from a fresh tape.
pub fn gradient_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.gradients(loss)?;

    let mut report = GradCheckReport::new();
    let mut probe = store.clone();
    for id in store.trainable_ids() {
        let name = store.get(id).name.clone();
        let n = store.get(id).value.len();
        let zeros = Tensor::zeros(store.get(id).value.shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = {
                let t = Tape::new();
                let v = f(&t, &probe)?.value().item();
                v
            };
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = {
                let t = Tape::new();
                let v = f(&t, &probe)?.value().item();
                v
            };
            probe.get_mut(id).value.data_mut()[i] = orig;
            report.record(&name, i, analytic.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = gradient_check(|_, v| v.sum(0), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, -0.7]).unwrap();
        let err = gradient_check(|_, v| v.relu().sum(0), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nan_is_failure() {
        assert_eq!(relative_error(f64::NAN, 1.0), f64::INFINITY);
    }
}
