//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward values on fresh inference
//! graphs, so it shares no code with the backward pass it checks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum accepted relative error per input.
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Central-difference gradient of a scalar function of `inputs[which]`.
pub fn numerical_gradient<F>(inputs: &[Tensor<f64>], which: usize, step: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs[which].len());
    for j in 0..inputs[which].len() {
        let orig = work[which].data()[j];
        work[which].data_mut()[j] = orig + step;
        let plus = f(&work)?;
        work[which].data_mut()[j] = orig - step;
        let minus = f(&work)?;
        work[which].data_mut()[j] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compare tape gradients of `build` against central differences for every
/// input. Fails with [`Error::Numerical`] if any input exceeds the tolerance.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], cfg: GradCheck, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = numerical_gradient(inputs, i, cfg.step, &eval)?;
        let err = relative_error(&analytic, &numeric);
        if !(err <= cfg.tolerance) {
            return Err(Error::Numerical(format!(
                "gradient check failed for input {i}: relative error {err:.3e} > {:.1e}",
                cfg.tolerance
            )));
        }
        relative_errors.push(err);
    }
    Ok(GradCheckReport { relative_errors })
}
