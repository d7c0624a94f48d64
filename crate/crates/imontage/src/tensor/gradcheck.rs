//! Finite-difference oracle for backward rules.
//!
//! Analytic gradients from the tape are compared against central differences
//!   (f(x + h e_i) - f(x - h e_i)) / 2h
//! evaluated in f64, where truncation error is O(h^2) and round-off stays
//! far below the tolerances used by the test suite.

use super::{Scalar, Tensor};

pub const DEFAULT_H: f64 = 1e-5;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Worst relative error between analytic and numeric gradients, with a floor
/// on the denominator so near-zero entries are judged absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// One gradient-check case: a scalar function of a single flat input vector,
/// evaluated both through the tape (analytic) and by central differences.
pub struct GradCheck {
    pub rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// Run `build` twice: once to harvest the tape gradient at `x0`, and once
    /// per perturbed coordinate for the numeric estimate. `build` gets the
    /// flat input and must return the scalar loss it evaluates to.
    pub fn run(
        x0: &[f64],
        mut loss: impl FnMut(&[f64]) -> f64,
        analytic: Vec<f64>,
    ) -> GradCheck {
        let numeric = central_diff_grad(&mut loss, x0, DEFAULT_H);
        GradCheck {
            rel_err: max_rel_err(&analytic, &numeric),
            analytic,
            numeric,
        }
    }
}

/// Deterministic standard normal draws through Box-Muller, used by gradient
/// tests and everywhere the stack needs Gaussian noise. Hand-rolled so the
/// byte stream behind a seed never depends on a distribution crate's
/// internals.
pub fn randn_vec<S: Scalar, R: rand::Rng>(rng: &mut R, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(S::from_f64(r * theta.cos()));
        if out.len() < n {
            out.push(S::from_f64(r * theta.sin()));
        }
    }
    out
}

/// Standard normal tensor with the given shape.
pub fn randn_tensor<S: Scalar, R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), randn_vec(rng, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_on_quadratic() {
        // f(x) = sum(x^2), grad = 2x exactly.
        let x = [1.0, -2.0, 0.5];
        let g = central_diff_grad(&mut |v| v.iter().map(|&x| x * x).sum(), &x, DEFAULT_H);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&expect, &g) < 1e-9, "got {g:?}");
    }

    #[test]
    fn randn_moments_are_sane() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = randn_vec(&mut rng, 20_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
