//! Dense vector/matrix arithmetic, seeded sampling and a finite-difference
//! gradient checker.

mod matrix;
mod rng;

pub use matrix::DenseMatrix;
pub use rng::RngStream;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("softmax of non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Elementwise independent draws from `N(mean_i, var_i)`.
pub fn sample_gaussian(rng: &mut RngStream, mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != var.len() {
        return Err(Error::Dimension(format!(
            "mean has {} entries, variance {}",
            mean.len(),
            var.len()
        )));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("variance {v} must be finite and >= 0")));
    }
    Ok(mean
        .iter()
        .zip(var)
        .map(|(&m, &v)| {
            // always consume a draw so the stream position does not depend on var
            let z: f64 = rng.sample(StandardNormal);
            if v == 0.0 {
                m
            } else {
                m + v.sqrt() * z
            }
        })
        .collect())
}

/// `n` draws from `N(mean, var)` with a shared mean and variance.
pub fn sample_gaussian_iid(rng: &mut RngStream, n: usize, mean: f64, var: f64) -> Result<Vec<f64>> {
    sample_gaussian(rng, &vec![mean; n], &vec![var; n])
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain(format!(
                "objective not finite near coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// blowing up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_err`] over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-700.0, 0.0, 3.5, 1e6] {
            let p = softmax(&[c, c, c]).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            sample_gaussian(&mut rng, &[1.0, 1.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(matches!(
            sample_gaussian(&mut rng, &[0.0], &[-1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = sample_gaussian(&mut RngStream::new(9, 1), &[0.0], &[1.0]).unwrap();
        let b = sample_gaussian(&mut RngStream::new(9, 1), &[0.0], &[1.0]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2024, 5);
        let xs = sample_gaussian_iid(&mut rng, 100_000, 0.0, 4.0).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff_grad(norm_sq, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 5.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn finite_diff_matches_softmax_ce_gradient() {
        let mut rng = RngStream::new(11, 0);
        let x = sample_gaussian_iid(&mut rng, 5, 0.0, 1.0).unwrap();
        let y = 2;
        let ce = |s: &[f64]| -softmax(s).unwrap()[y].ln();
        let fd = finite_diff_grad(ce, &x, 1e-5).unwrap();
        let mut analytic = softmax(&x).unwrap();
        analytic[y] -= 1.0;
        assert!(max_rel_err(&fd, &analytic, 1e-8) < 1e-6);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn sigmoid_softplus_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
