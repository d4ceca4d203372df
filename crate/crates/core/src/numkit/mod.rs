//! Numerical substrate: tape-based reverse-mode differentiation, flat
//! parameter vectors, the seeded generator, and the central-difference
//! oracle every gradient in the crate is checked against.

mod params;
mod rng;
mod tape;

pub use params::{LayoutBuilder, ParamVector, Segment};
pub use rng::Rng;
pub use tape::{OpKind, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("non-finite value {value} at node {node} ({op})")]
    NonFinite { node: usize, op: String, value: f64 },
    #[error("softmax of empty input")]
    EmptySoftmax,
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Probability vector from logits, computed with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumError> {
    if logits.is_empty() {
        return Err(NumError::EmptySoftmax);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Log-probabilities from logits (log-sum-exp with max subtraction).
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NumError> {
    if logits.is_empty() {
        return Err(NumError::EmptySoftmax);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    Ok(logits.iter().map(|&l| l - lse).collect())
}

/// Value and gradient of a scalar loss built on a fresh tape.
///
/// The builder receives one leaf per parameter, in order.
pub fn grad<F>(loss_builder: F, at: &ParamVector) -> Result<(f64, Vec<f64>), NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::with_capacity(at.len() * 4);
    let leaves = tape.vars(at.values());
    let out = loss_builder(&mut tape, &leaves);
    let g = tape.gradient(out, &leaves)?;
    Ok((tape.value(out), g))
}

/// Evaluates the loss builder without keeping the gradient.
pub fn eval<F>(loss_builder: &F, at: &[f64]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::with_capacity(at.len() * 4);
    let leaves = tape.vars(at);
    let out = loss_builder(&mut tape, &leaves);
    tape.value(out)
}

/// Central differences `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff<F>(loss_builder: F, at: &ParamVector, step: f64) -> Result<Vec<f64>, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(step > 0.0) {
        return Err(NumError::BadStep(step));
    }
    let mut theta = at.values().to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let x = theta[i];
        theta[i] = x + step;
        let up = eval(&loss_builder, &theta);
        theta[i] = x - step;
        let down = eval(&loss_builder, &theta);
        theta[i] = x;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Largest coordinate-wise relative error `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dominating
/// on pure finite-difference roundoff.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(softmax(&[]), Err(NumError::EmptySoftmax));
    }

    #[test]
    fn grad_of_square_and_constant() {
        let at = ParamVector::flat(vec![3.0]);
        let (_, g) = grad(|t, p| t.mul(p[0], p[0]), &at).unwrap();
        assert_eq!(g, vec![6.0]);
        let (_, g) = grad(|t, _| t.constant(4.0), &ParamVector::flat(vec![1.0, 2.0])).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(|t, p| t.mul(p[0], p[0]), &ParamVector::flat(vec![3.0]), 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff(|t, p| t.exp(p[0]), &ParamVector::flat(vec![0.0]), 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!(finite_diff(|t, p| t.exp(p[0]), &ParamVector::flat(vec![0.0]), 0.0).is_err());
    }
}
