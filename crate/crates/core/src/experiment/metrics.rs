//! Ranking and classification metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkernel::{DenseMatrix, RngStream};
use crate::recmodel::{score, ItemEmbeddings, ScorerParams};

/// Ranking cut-offs reported everywhere.
pub const CUTOFFS: [usize; 4] = [5, 10, 15, 20];

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Domain("no ranked users".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Domain("ranks are 1-based".into()));
    }
    Ok(())
}

/// Fraction of users whose test item ranks within the top `k`.
pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean of `1/log₂(rank + 1)` over users with `rank ≤ k` (zero otherwise).
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / ranks.len() as f64)
}

/// Candidate set used when ranking a held-out item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "count")]
pub enum Candidates {
    /// Every item the user has not interacted with in training.
    #[default]
    All,
    /// The test item plus this many uniformly sampled non-interacted items.
    Sampled(usize),
}

/// Rank of `test_item` among the non-interacted candidates:
/// `1 + #{candidates scoring ≥ the test item}`, so ties count against it.
pub fn rank_test_item(
    em_u: &[f64],
    train: &[usize],
    test_item: Option<usize>,
    items: &ItemEmbeddings,
    scorer: &ScorerParams,
    candidates: Candidates,
    rng: &mut RngStream,
) -> Result<usize> {
    let test = test_item.ok_or_else(|| Error::State("user has no held-out item".into()))?;
    let target = score(em_u, items.row(test), scorer)?;
    let beats = |j: usize| -> Result<bool> { Ok(score(em_u, items.row(j), scorer)? >= target) };
    let mut rank = 1;
    match candidates {
        Candidates::All => {
            for j in 0..items.rows() {
                if j != test && train.binary_search(&j).is_err() && beats(j)? {
                    rank += 1;
                }
            }
        }
        Candidates::Sampled(count) => {
            let negatives = crate::recmodel::sample_negatives_excluding(
                train,
                test,
                items.rows(),
                count,
                rng,
            )?;
            for j in negatives {
                if beats(j)? {
                    rank += 1;
                }
            }
        }
    }
    Ok(rank)
}

/// Ranks every user with a held-out item, in parallel.
pub fn rank_all(
    users: &DenseMatrix,
    train: &[Vec<usize>],
    test: &[Option<usize>],
    items: &ItemEmbeddings,
    scorer: &ScorerParams,
    candidates: Candidates,
    rng: &RngStream,
) -> Result<Vec<usize>> {
    (0..users.rows())
        .into_par_iter()
        .filter(|&u| test[u].is_some())
        .map(|u| {
            let mut local = rng.derive(u as u64);
            rank_test_item(users.row(u), &train[u], test[u], items, scorer, candidates, &mut local)
        })
        .collect()
}

fn check_labels(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Domain("no labels to score".into()));
    }
    Ok(())
}

/// Mean per-class recall over classes `0..n_classes`.
pub fn bacc(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    check_labels(pred, truth)?;
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= n_classes {
            return Err(Error::Domain(format!("label {t} out of range")));
        }
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    if let Some(c) = totals.iter().position(|&n| n == 0) {
        return Err(Error::Domain(format!("class {c} has no examples")));
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| h as f64 / n as f64)
        .sum::<f64>()
        / n_classes as f64)
}

/// Micro-averaged F1 over all classes.
pub fn f1_micro(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(pred, truth)?;
    let n_classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for c in 0..n_classes {
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hr_examples() {
        assert_eq!(hr_at_k(&[1, 1, 1], 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[11], 10).unwrap(), 0.0);
        assert!((hr_at_k(&[1, 5, 12], 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(hr_at_k(&[], 10).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3], 3).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[1, 3], 10).unwrap(), 0.75);
        assert!(ndcg_at_k(&[], 10).is_err());
    }

    #[test]
    fn bacc_examples() {
        assert_eq!(bacc(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(bacc(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        let truth: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
        let mut pred = truth.clone();
        pred[0] = 1;
        for p in pred.iter_mut().skip(10).take(5) {
            *p = 0;
        }
        assert!((bacc(&pred, &truth, 2).unwrap() - 0.7).abs() < 1e-15);
        assert!(bacc(&[0, 0], &[0, 0], 2).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_micro(&[0, 2, 1], &[0, 2, 1]).unwrap(), 1.0);
        assert_eq!(f1_micro(&[1, 0], &[0, 1]).unwrap(), 0.0);
        let (p, t) = ([0, 1, 2, 2], [0, 1, 2, 0]);
        assert_eq!(f1_micro(&p, &t).unwrap(), 0.75);
        assert_eq!(accuracy(&p, &t).unwrap(), 0.75);
    }

    #[test]
    fn ranking_examples() {
        let items = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let mut rng = RngStream::new(0, 0);
        let em = [1.0, 0.0];
        let r = rank_test_item(&em, &[], Some(2), &items, &ScorerParams::Dot, Candidates::All, &mut rng);
        assert_eq!(r.unwrap(), 1);
        let zero = [0.0, 0.0];
        let r = rank_test_item(&zero, &[0], Some(2), &items, &ScorerParams::Dot, Candidates::All, &mut rng);
        assert_eq!(r.unwrap(), 3, "ties count against the test item");
        let r = rank_test_item(&em, &[], None, &items, &ScorerParams::Dot, Candidates::All, &mut rng);
        assert!(matches!(r, Err(Error::State(_))));
    }
}
