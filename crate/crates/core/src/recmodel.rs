//! Recommendation backbone: user/item embeddings, a dot or one-hidden-layer
//! scorer, BCE with sampled negatives, and hand-derived gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{axpy, dot, sigmoid, softplus, DenseMatrix, RngStream};

pub type UserEmbedding = Vec<f64>;

/// `|ℐ| × d` matrix; row `i` is the embedding of item `i`.
pub type ItemEmbeddings = DenseMatrix;

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_NEGATIVES: usize = 4;

/// One-hidden-layer scorer over the concatenation `[em_u; em_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpScorer {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Scoring function parameters `ψ`. The same shape doubles as a gradient
/// container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ScorerParams {
    Dot,
    Mlp(MlpScorer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Dot,
    Mlp,
}

impl ScorerParams {
    pub fn init(kind: ScorerKind, dim: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(match kind {
            ScorerKind::Dot => ScorerParams::Dot,
            ScorerKind::Mlp => {
                let w2 = xavier_init(1, hidden, rng)?.into_vec();
                ScorerParams::Mlp(MlpScorer {
                    w1: xavier_init(hidden, 2 * dim, rng)?,
                    b1: vec![0.0; hidden],
                    w2,
                    b2: 0.0,
                })
            }
        })
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ScorerParams::Dot => ScorerParams::Dot,
            ScorerParams::Mlp(m) => ScorerParams::Mlp(MlpScorer {
                w1: DenseMatrix::zeros(m.w1.rows(), m.w1.cols()),
                b1: vec![0.0; m.b1.len()],
                w2: vec![0.0; m.w2.len()],
                b2: 0.0,
            }),
        }
    }

    /// All parameters as one flat vector (`w1`, `b1`, `w2`, `b2`).
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            ScorerParams::Dot => Vec::new(),
            ScorerParams::Mlp(m) => {
                let mut v = m.w1.as_slice().to_vec();
                v.extend_from_slice(&m.b1);
                v.extend_from_slice(&m.w2);
                v.push(m.b2);
                v
            }
        }
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.flatten().len() {
            return Err(Error::Dimension(format!(
                "scorer expects {} parameters, got {}",
                self.flatten().len(),
                flat.len()
            )));
        }
        Ok(match self {
            ScorerParams::Dot => ScorerParams::Dot,
            ScorerParams::Mlp(m) => {
                let (r, c) = m.w1.shape();
                let h = m.b1.len();
                let (w1, rest) = flat.split_at(r * c);
                let (b1, rest) = rest.split_at(h);
                let (w2, rest) = rest.split_at(h);
                ScorerParams::Mlp(MlpScorer {
                    w1: DenseMatrix::from_vec(r, c, w1.to_vec())?,
                    b1: b1.to_vec(),
                    w2: w2.to_vec(),
                    b2: rest[0],
                })
            }
        })
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ScorerParams) -> Result<()> {
        match (self, other) {
            (ScorerParams::Dot, ScorerParams::Dot) => Ok(()),
            (ScorerParams::Mlp(a), ScorerParams::Mlp(b)) => {
                if a.b1.len() != b.b1.len() {
                    return Err(Error::Dimension("scorer hidden widths differ".into()));
                }
                a.w1.add_scaled(alpha, &b.w1)?;
                axpy(alpha, &b.b1, &mut a.b1);
                axpy(alpha, &b.w2, &mut a.w2);
                a.b2 += alpha * b.b2;
                Ok(())
            }
            _ => Err(Error::Dimension("scorer variants differ".into())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Xavier/Glorot uniform initialization in `±√(6 / (fan_in + fan_out))`,
/// with `fan_in = cols` and `fan_out = rows`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("xavier_init of a {rows}x{cols} shape")));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
}

fn check_dims(em_u: &[f64], em_i: &[f64]) -> Result<()> {
    if em_u.len() != em_i.len() {
        return Err(Error::Dimension(format!(
            "user embedding has dim {}, item embedding {}",
            em_u.len(),
            em_i.len()
        )));
    }
    Ok(())
}

/// Matching score `s_ψ(em_u, em_i)`.
pub fn score(em_u: &[f64], em_i: &[f64], scorer: &ScorerParams) -> Result<f64> {
    check_dims(em_u, em_i)?;
    match scorer {
        ScorerParams::Dot => Ok(dot(em_u, em_i)),
        ScorerParams::Mlp(m) => {
            if m.w1.cols() != 2 * em_u.len() {
                return Err(Error::Dimension(format!(
                    "mlp scorer expects input dim {}, got {}",
                    m.w1.cols(),
                    2 * em_u.len()
                )));
            }
            let x = [em_u, em_i].concat();
            let a = m.w1.matvec(&x)?;
            Ok(a.iter()
                .zip(&m.b1)
                .zip(&m.w2)
                .map(|((a, b), w)| w * (a + b).max(0.0))
                .sum::<f64>()
                + m.b2)
        }
    }
}

/// Score and its gradient with respect to the user embedding, the item
/// embedding and the scorer parameters, accumulated with weight `g` into the
/// provided buffers.
fn score_backward(
    em_u: &[f64],
    em_i: &[f64],
    scorer: &ScorerParams,
    g: f64,
    grad_u: &mut [f64],
    grad_i: &mut [f64],
    grad_scorer: &mut ScorerParams,
) -> Result<()> {
    match (scorer, grad_scorer) {
        (ScorerParams::Dot, ScorerParams::Dot) => {
            axpy(g, em_i, grad_u);
            axpy(g, em_u, grad_i);
            Ok(())
        }
        (ScorerParams::Mlp(m), ScorerParams::Mlp(gm)) => {
            let d = em_u.len();
            let x = [em_u, em_i].concat();
            let pre = m.w1.matvec(&x)?;
            let mut da = vec![0.0; pre.len()];
            for k in 0..pre.len() {
                let a = pre[k] + m.b1[k];
                if a > 0.0 {
                    gm.w2[k] += g * a;
                    da[k] = g * m.w2[k];
                }
            }
            gm.b2 += g;
            gm.w1.add_outer(1.0, &da, &x);
            axpy(1.0, &da, &mut gm.b1);
            let dx = m.w1.matvec_t(&da)?;
            axpy(1.0, &dx[..d], grad_u);
            axpy(1.0, &dx[d..], grad_i);
            Ok(())
        }
        _ => Err(Error::State("gradient buffer does not match scorer variant".into())),
    }
}

/// Output of [`rec_loss_and_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecGrads {
    /// Summed BCE over all examples.
    pub loss: f64,
    pub n_examples: usize,
    pub grad_user: Vec<f64>,
    /// Gradients for touched item rows only.
    pub grad_items: BTreeMap<usize, Vec<f64>>,
    pub grad_scorer: ScorerParams,
}

impl RecGrads {
    pub fn mean_loss(&self) -> f64 {
        if self.n_examples == 0 {
            0.0
        } else {
            self.loss / self.n_examples as f64
        }
    }
}

/// BCE over explicit `(item, label)` examples.
///
/// The loss is `Σ softplus(s) − label·s`, i.e. the summed binary
/// cross-entropy of `sigmoid(s)`, and `∂ℓ/∂s = sigmoid(s) − label`.
pub fn bce_loss_and_grads(
    em_u: &[f64],
    examples: &[(usize, f64)],
    items: &ItemEmbeddings,
    scorer: &ScorerParams,
) -> Result<RecGrads> {
    if em_u.len() != items.cols() {
        return Err(Error::Dimension(format!(
            "user dim {} vs item dim {}",
            em_u.len(),
            items.cols()
        )));
    }
    let mut grad_user = vec![0.0; em_u.len()];
    let mut grad_items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut grad_scorer = scorer.zeros_like();
    let mut loss = 0.0;
    for &(item, label) in examples {
        if item >= items.rows() {
            return Err(Error::Dimension(format!("item index {item} out of range")));
        }
        let em_i = items.row(item);
        let s = score(em_u, em_i, scorer)?;
        loss += softplus(s) - label * s;
        let g = sigmoid(s) - label;
        let gi = grad_items
            .entry(item)
            .or_insert_with(|| vec![0.0; em_u.len()]);
        score_backward(em_u, em_i, scorer, g, &mut grad_user, gi, &mut grad_scorer)?;
    }
    Ok(RecGrads {
        loss,
        n_examples: examples.len(),
        grad_user,
        grad_items,
        grad_scorer,
    })
}

/// Samples `negatives_per_positive` non-interacted items (with replacement)
/// per positive. `positives` must be sorted.
pub fn sample_negatives(
    positives: &[usize],
    n_items: usize,
    negatives_per_positive: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    debug_assert!(positives.windows(2).all(|w| w[0] < w[1]));
    let wanted = positives.len() * negatives_per_positive;
    if wanted == 0 {
        return Ok(Vec::new());
    }
    if positives.len() >= n_items {
        return Err(Error::Sampling(format!(
            "user interacted with all {n_items} items; no negative candidates"
        )));
    }
    let mut out = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let cand = rng.random_range(0..n_items);
        if positives.binary_search(&cand).is_err() {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Up to `count` distinct items outside `positives` (sorted) and other than
/// `exclude`, drawn uniformly without replacement; all of them when fewer
/// are available.
pub fn sample_negatives_excluding(
    positives: &[usize],
    exclude: usize,
    n_items: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_items)
        .filter(|&j| j != exclude && positives.binary_search(&j).is_err())
        .collect();
    if pool.is_empty() {
        return Err(Error::Sampling("no negative candidates left".into()));
    }
    if count >= pool.len() {
        return Ok(pool);
    }
    let mut picked = rand::seq::index::sample(rng, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|p| pool[p]).collect())
}

/// Summed BCE over the user's positives (label 1) and freshly sampled
/// negatives (label 0), with gradients for the user embedding, the touched
/// item rows and the scorer.
pub fn rec_loss_and_grads(
    em_u: &[f64],
    positives: &[usize],
    items: &ItemEmbeddings,
    scorer: &ScorerParams,
    negatives_per_positive: usize,
    rng: &mut RngStream,
) -> Result<RecGrads> {
    if positives.is_empty() {
        return Err(Error::Sampling("user has no training interactions".into()));
    }
    let negatives = sample_negatives(positives, items.rows(), negatives_per_positive, rng)?;
    let examples: Vec<(usize, f64)> = positives
        .iter()
        .map(|&i| (i, 1.0))
        .chain(negatives.into_iter().map(|i| (i, 0.0)))
        .collect();
    bce_loss_and_grads(em_u, &examples, items, scorer)
}

/// `params ← params − lr · grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("learning rate {lr} must be > 0")));
    }
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerics("non-finite gradient".into()));
    }
    axpy(-lr, grads, params);
    Ok(())
}

/// Sparse SGD on item rows; rows absent from `grads` are left untouched.
pub fn sgd_step_rows(
    items: &mut ItemEmbeddings,
    grads: &BTreeMap<usize, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    for (&row, g) in grads {
        if row >= items.rows() {
            return Err(Error::Dimension(format!("item row {row} out of range")));
        }
        sgd_step(items.row_mut(row), g, lr)?;
    }
    Ok(())
}
