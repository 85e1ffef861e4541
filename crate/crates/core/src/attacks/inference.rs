//! Embedding-based attribute inference: an MLP trained on a shadow subset
//! of users and evaluated on the rest.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{backward, forward_with_noise, AdversaryParams, HeadKind};
use crate::error::{Error, Result};
use crate::numkernel::{argmax, DenseMatrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub shadow_fraction: f64,
    /// Standardise features with shadow-set statistics before training.
    pub standardize: bool,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            hidden: 100,
            epochs: 200,
            lr: 0.05,
            shadow_fraction: 0.2,
            standardize: true,
        }
    }
}

/// One-hidden-layer softmax classifier over user embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerMLP {
    pub params: AdversaryParams,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Disjoint user-index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSplit {
    pub shadow: Vec<usize>,
    pub eval: Vec<usize>,
}

impl AttackerMLP {
    /// An attacker with all-zero weights and identity preprocessing.
    pub fn zeroed(input_dim: usize, hidden: usize, n_classes: usize) -> Result<Self> {
        let mut params =
            AdversaryParams::init(HeadKind::Plain, input_dim, hidden, n_classes, 0.0, &mut RngStream::new(0, 0))?;
        params = params.zeros_like();
        Ok(AttackerMLP {
            params,
            shift: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
        })
    }

    fn preprocess(&self, em: &[f64]) -> Vec<f64> {
        em.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn predict_proba(&self, em: &[f64]) -> Result<Vec<f64>> {
        if em.len() != self.params.input_dim() {
            return Err(Error::Dimension(format!(
                "attacker expects dim {}, got {}",
                self.params.input_dim(),
                em.len()
            )));
        }
        Ok(forward_with_noise(&self.params, &self.preprocess(em), None)?.probs)
    }
}

/// Deterministic shadow/eval split: `round(fraction · n)` shadow users
/// (at least one, at most `n − 1`), both lists sorted.
pub fn split_users(n_users: usize, shadow_fraction: f64, rng: &mut RngStream) -> Result<AttackSplit> {
    if n_users < 2 {
        return Err(Error::Domain("attribute attack needs at least 2 users".into()));
    }
    if !(shadow_fraction > 0.0 && shadow_fraction < 1.0) {
        return Err(Error::Domain(format!("shadow fraction {shadow_fraction} outside (0, 1)")));
    }
    let k = ((shadow_fraction * n_users as f64).round() as usize).clamp(1, n_users - 1);
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(rng);
    let mut shadow = order[..k].to_vec();
    let mut eval = order[k..].to_vec();
    shadow.sort_unstable();
    eval.sort_unstable();
    Ok(AttackSplit { shadow, eval })
}

/// Trains on the shadow users with per-example SGD on cross-entropy.
pub fn train_attribute_attacker(
    embeddings: &DenseMatrix,
    labels: &[usize],
    n_classes: usize,
    cfg: &AttackerConfig,
    rng: &mut RngStream,
) -> Result<(AttackerMLP, AttackSplit)> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Domain("attacker lr must be > 0".into()));
    }
    let split = split_users(labels.len(), cfg.shadow_fraction, rng)?;
    let mut seen = vec![false; n_classes];
    for &u in &split.shadow {
        *seen.get_mut(labels[u]).ok_or_else(|| Error::Domain(format!("label {} out of range", labels[u])))? = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Domain("shadow set contains a single attribute class".into()));
    }

    let d = embeddings.cols();
    let (mut shift, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        let n = split.shadow.len() as f64;
        for k in 0..d {
            let mean = split.shadow.iter().map(|&u| embeddings.get(u, k)).sum::<f64>() / n;
            let var = split
                .shadow
                .iter()
                .map(|&u| (embeddings.get(u, k) - mean).powi(2))
                .sum::<f64>()
                / n;
            shift[k] = mean;
            scale[k] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
    }
    let params = AdversaryParams::init(HeadKind::Plain, d, cfg.hidden, n_classes, 0.0, rng)?;
    let mut attacker = AttackerMLP { params, shift, scale };
    let inputs: Vec<Vec<f64>> = split
        .shadow
        .iter()
        .map(|&u| attacker.preprocess(embeddings.row(u)))
        .collect();

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &i in &order {
            let trace = forward_with_noise(&attacker.params, &inputs[i], None)?;
            let (g, _) = backward(&attacker.params, &trace, labels[split.shadow[i]])?;
            attacker.params.add_scaled(-cfg.lr, &g)?;
        }
        if !attacker.params.is_finite() {
            return Err(Error::Numerics("attribute attacker diverged".into()));
        }
    }
    Ok((attacker, split))
}

/// Argmax of the attacker's softmax for each row; ties go to the lowest
/// class.
pub fn infer_attributes(attacker: &AttackerMLP, embeddings: &DenseMatrix) -> Result<Vec<usize>> {
    embeddings
        .iter_rows()
        .map(|em| Ok(argmax(&attacker.predict_proba(em)?)))
        .collect()
}
