//! Central finite-difference checks for the autodiff engine.

use crate::autograd::{no_grad, Var};
use crate::error::Result;
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
}

impl GradReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: (0.0, 0.0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
            self.worst = (analytic, numeric);
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning round-off into huge relative errors.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every coordinate of every input of a scalar function.
pub fn check_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    eps: f64,
    f: impl Fn(&[Var<T>]) -> Result<Var<T>>,
) -> Result<GradReport> {
    let leaves: Vec<Var<T>> = inputs.iter().cloned().map(Var::leaf).collect();
    let grads = f(&leaves)?.backward()?;
    let mut report = GradReport::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let args: Vec<Var<T>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += T::of(delta);
                        }
                        Var::constant(t)
                    })
                    .collect();
                Ok(no_grad(|| f(&args))?.value().item()?.as_f64())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            report.record(analytic.data()[j].as_f64(), numeric, 1e-8);
        }
    }
    Ok(report)
}

/// Checks the given `(param index, flat coordinate)` pairs of a loss closure
/// that reads the parameters' current values.
pub fn check_param_gradients<T: Scalar>(
    params: &[&Param<T>],
    coords: &[(usize, usize)],
    eps: f64,
    floor: f64,
    f: impl Fn() -> Result<Var<T>>,
) -> Result<GradReport> {
    let grads = f()?.backward()?;
    let mut report = GradReport::new();
    for &(pi, j) in coords {
        let p = params[pi];
        let analytic = grads.param(p).map(|g| g.data()[j].as_f64()).unwrap_or(0.0);
        let original = p.value();
        let eval = |delta: f64| -> Result<f64> {
            let mut t = (*original).clone();
            t.data_mut()[j] += T::of(delta);
            p.set(t)?;
            Ok(no_grad(&f)?.value().item()?.as_f64())
        };
        let plus = eval(eps)?;
        let minus = eval(-eps)?;
        p.set((*original).clone())?;
        report.record(analytic, (plus - minus) / (2.0 * eps), floor);
    }
    Ok(report)
}
