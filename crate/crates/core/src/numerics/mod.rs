//! Dense tensors, a reverse-mode computation record, and gradient checking.
//!
//! Only row-wise broadcasting (`T×d` with `d`) is supported; every other shape
//! mismatch is an error.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};


use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("function is not deterministic: two forward passes disagree ({first} vs {second})")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
}

/// Result of comparing reverse-mode and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(param index, flat element index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// `(reverse-mode, central-difference)` gradients at `worst`.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// Relative error used throughout gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every element of every parameter. See [`grad_check_sampled`].
pub fn grad_check<B>(build: B, params: &[Tensor<f64>], eps: f64) -> Result<f64, NumericsError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    grad_check_sampled(build, params, eps, None, 0).map(|r| r.max_relative_error)
}

/// Central-difference gradient check in 64-bit.
///
/// `build` records a scalar loss given one leaf per parameter. When
/// `max_per_param` is set, at most that many elements of each parameter are
/// perturbed (chosen with a seeded generator); analytic gradients are always
/// computed in full.
pub fn grad_check_sampled<B>(
    build: B,
    params: &[Tensor<f64>],
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(NumericsError::InvalidStep(eps));
    }
    if let Some(bad) = params.iter().position(|p| !p.all_finite()) {
        return Err(NumericsError::ShapeMismatch(format!("parameter {bad} is not finite")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new().with_finite_check(true);
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministicFunction { first, second });
    }

    let mut g = Graph::new().with_finite_check(true);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        let indices: Vec<usize> = match max_per_param {
            Some(k) if k < p.len() => {
                let mut idx = sample(&mut rng, p.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..p.len()).collect(),
        };
        for i in indices {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[i], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((pi, i));
                report.worst_values = (analytic.data()[i], numeric);
            }
        }
    }
    Ok(report)
}
