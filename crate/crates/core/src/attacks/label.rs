//! Analytic label recovery from final-layer gradients.
//!
//! For softmax cross-entropy the final-layer gradient row of class `i` is
//! `(ŷ_i − y_i)·u_i`, where `u_i` is the head input (possibly masked by the
//! μ-path noise). Projecting the observed row onto the attacker's guess of
//! `u_i` yields the correction term `δ_i`, and the dummy label minimising the
//! matching loss for a fixed dummy input is `y*_i = ŷ′_i − δ_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::GradientRecord;
use crate::numkernel::{argmax, dot, hadamard, norm_sq, DenseMatrix};

/// Closed-form reconstruction for one gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub y_star: Vec<f64>,
    pub y_hat_prime: Vec<f64>,
    pub delta: Vec<f64>,
    /// `argmax_i y*_i`, ties to the lowest class.
    pub predicted: usize,
    /// Filled in by evaluation against the stored label.
    pub recovered: Option<bool>,
}

impl ReconstructionResult {
    pub fn score(mut self, true_y: usize) -> Self {
        self.recovered = Some(self.predicted == true_y);
        self
    }
}

/// `δ_i = b_iᵀ ∇_i / ‖b_i‖²` with one basis vector per class.
fn reconstruct(
    grad: &DenseMatrix,
    basis: impl Fn(usize) -> Vec<f64>,
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    let n = grad.rows();
    if y_hat_prime.len() != n {
        return Err(Error::Dimension(format!(
            "{} predicted probabilities for {n} gradient rows",
            y_hat_prime.len()
        )));
    }
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let b = basis(i);
        if b.len() != grad.cols() {
            return Err(Error::Dimension(format!(
                "basis of length {} for gradient rows of length {}",
                b.len(),
                grad.cols()
            )));
        }
        let nb = norm_sq(&b);
        if !(nb > 0.0) || !nb.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "projection vector for class {i} has norm² {nb}"
            )));
        }
        delta.push(dot(&b, grad.row(i)) / nb);
    }
    let y_star: Vec<f64> = y_hat_prime.iter().zip(&delta).map(|(p, d)| p - d).collect();
    Ok(ReconstructionResult {
        predicted: argmax(&y_star),
        y_star,
        y_hat_prime: y_hat_prime.to_vec(),
        delta,
        recovered: None,
    })
}

/// Plain head: `δ_i = h′ᵀ∇W_i / ‖h′‖²`.
pub fn closed_form_plain(
    grad: &DenseMatrix,
    h_prime: &[f64],
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    reconstruct(grad, |_| h_prime.to_vec(), y_hat_prime)
}

/// DSVAE μ-path: `δ_i = (z′⊙ε₁′_i)ᵀ∇W^μ_i / ‖z′⊙ε₁′_i‖²`, where `ε₁′_i` is
/// row `i` of the attacker's μ-path noise.
pub fn closed_form_dsvae(
    grad_mu: &DenseMatrix,
    z_prime: &[f64],
    eps1_prime: &DenseMatrix,
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    if eps1_prime.shape() != grad_mu.shape() {
        return Err(Error::Dimension(format!(
            "ε₁′ is {:?}, gradient is {:?}",
            eps1_prime.shape(),
            grad_mu.shape()
        )));
    }
    if z_prime.len() != grad_mu.cols() {
        return Err(Error::Dimension("z′ length does not match gradient rows".into()));
    }
    reconstruct(grad_mu, |i| hadamard(z_prime, eps1_prime.row(i)), y_hat_prime)
}

pub fn closed_form_label_plain(
    record: &GradientRecord,
    h_prime: &[f64],
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    Ok(closed_form_plain(record.grads.primary(), h_prime, y_hat_prime)?.score(record.oracle.y))
}

/// VAE μ-path: `δ_i = z′ᵀ∇W^μ_i / ‖z′‖²`.
pub fn closed_form_label_vae(
    record: &GradientRecord,
    z_prime: &[f64],
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    Ok(closed_form_plain(record.grads.primary(), z_prime, y_hat_prime)?.score(record.oracle.y))
}

pub fn closed_form_label_dsvae(
    record: &GradientRecord,
    z_prime: &[f64],
    eps1_prime: &DenseMatrix,
    y_hat_prime: &[f64],
) -> Result<ReconstructionResult> {
    Ok(
        closed_form_dsvae(record.grads.primary(), z_prime, eps1_prime, y_hat_prime)?
            .score(record.oracle.y),
    )
}

/// Noise-factorised correction term, computed from the true client-side
/// quantities: `δ_i = (ŷ_i − y_i) · Σ_k z_k ε₁_ik z′_k ε₁′_ik / ‖z′⊙ε₁′_i‖²`.
///
/// The inner sum is the elementwise pairing of the client's and the
/// attacker's μ-path noise weighted by `z ⊙ z′`.
pub fn factorized_delta(
    y_hat: &[f64],
    y: usize,
    z: &[f64],
    eps1: &DenseMatrix,
    z_prime: &[f64],
    eps1_prime: &DenseMatrix,
) -> Result<Vec<f64>> {
    let n = y_hat.len();
    if y >= n || eps1.rows() != n || eps1.shape() != eps1_prime.shape() {
        return Err(Error::Dimension("inconsistent factorisation inputs".into()));
    }
    if z.len() != eps1.cols() || z_prime.len() != eps1.cols() {
        return Err(Error::Dimension("z / z′ length does not match noise rows".into()));
    }
    (0..n)
        .map(|i| {
            let masked = hadamard(z_prime, eps1_prime.row(i));
            let denom = norm_sq(&masked);
            if !(denom > 0.0) {
                return Err(Error::DegenerateInput(format!("‖z′⊙ε₁′‖ = 0 for class {i}")));
            }
            let pairing: f64 = (0..z.len())
                .map(|k| z[k] * eps1.get(i, k) * z_prime[k] * eps1_prime.get(i, k))
                .sum();
            let residual = y_hat[i] - if i == y { 1.0 } else { 0.0 };
            Ok(residual * pairing / denom)
        })
        .collect()
}

/// Per-class reconstruction errors against the client's true values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    /// `|ŷ′_i − ŷ_i|`: how well the attacker reproduces the prediction.
    pub yhat_error: Vec<f64>,
    /// `|δ_i − (ŷ_i − y_i)|`: how much of the gradient's class preference
    /// is lost.
    pub delta_error: Vec<f64>,
}

impl ComponentReport {
    pub fn mean_yhat_error(&self) -> f64 {
        self.yhat_error.iter().sum::<f64>() / self.yhat_error.len() as f64
    }

    pub fn mean_delta_error(&self) -> f64 {
        self.delta_error.iter().sum::<f64>() / self.delta_error.len() as f64
    }
}

pub fn decompose_components(
    result: &ReconstructionResult,
    true_y: usize,
    true_y_hat: &[f64],
) -> Result<ComponentReport> {
    let n = result.delta.len();
    if true_y_hat.len() != n || true_y >= n {
        return Err(Error::Dimension("true prediction does not match reconstruction".into()));
    }
    let yhat_error = (0..n)
        .map(|i| (result.y_hat_prime[i] - true_y_hat[i]).abs())
        .collect();
    let delta_error = (0..n)
        .map(|i| {
            let preference = true_y_hat[i] - if i == true_y { 1.0 } else { 0.0 };
            (result.delta[i] - preference).abs()
        })
        .collect();
    Ok(ComponentReport { yhat_error, delta_error })
}

/// Outcome of the sign-based label rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "verdict", content = "label")]
pub enum IdlgVerdict {
    Label(usize),
    Undecided,
}

impl IdlgVerdict {
    pub fn label(self) -> Option<usize> {
        match self {
            IdlgVerdict::Label(l) => Some(l),
            IdlgVerdict::Undecided => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowSign {
    Zero,
    Positive,
    Negative,
    Mixed,
}

fn row_sign(row: &[f64]) -> RowSign {
    let pos = row.iter().any(|&v| v > 0.0);
    let neg = row.iter().any(|&v| v < 0.0);
    match (pos, neg) {
        (false, false) => RowSign::Zero,
        (true, false) => RowSign::Positive,
        (false, true) => RowSign::Negative,
        (true, true) => RowSign::Mixed,
    }
}

/// Sign rule on raw gradient rows: with a non-negative head input every
/// nonzero entry of row `i` has the sign of `ŷ_i − y_i`, so the true class
/// is the unique non-positive row. Mixed-sign rows, or any pattern other
/// than exactly one negative row among non-negative ones, are undecided.
pub fn idlg_from_gradient(grad: &DenseMatrix) -> IdlgVerdict {
    let signs: Vec<RowSign> = grad.iter_rows().map(row_sign).collect();
    if signs.contains(&RowSign::Mixed) {
        return IdlgVerdict::Undecided;
    }
    let negatives: Vec<usize> = signs
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == RowSign::Negative)
        .map(|(i, _)| i)
        .collect();
    match negatives.as_slice() {
        [only] => IdlgVerdict::Label(*only),
        _ => IdlgVerdict::Undecided,
    }
}

/// iDLG on the record's `∇W` (plain) or `∇W^μ` (stochastic heads).
pub fn idlg_label(record: &GradientRecord) -> IdlgVerdict {
    idlg_from_gradient(record.grads.primary())
}
