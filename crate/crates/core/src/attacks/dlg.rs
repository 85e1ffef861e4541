//! Iterative gradient matching against the adversary's final layer.
//!
//! The attacker holds the model snapshot of the attacked round and optimises
//! a dummy embedding `em′` and dummy label logits `q` (with `y′ = softmax(q)`)
//! so that the replayed final-layer gradient matches the observed one:
//!
//! `D(em′, q) = Σ_i ‖(ŷ′_i − y′_i)·(z′ ⊙ m_i) − T_i‖²`
//!
//! where `T` is the observed `∇W` (plain) or `∇W^μ` (stochastic heads) and
//! `m_i` is row `i` of the attacker's own `ε₁′` for DSVAE and all ones
//! otherwise. Stochastic heads are replayed with a noise draw the attacker
//! samples once per attack, since the client's draw is never uploaded.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::adversary::{effective_weights, AdversaryParams, FinalLayerGrad, HeadKind, NoiseDraw};
use crate::error::{Error, Result};
use crate::fedsim::GradientRecord;
use crate::numkernel::{argmax, axpy, dot, norm, sample_gaussian_iid, softmax, DenseMatrix, RngStream};

const STREAM_NOISE: u64 = 0x6e6f6973;
const STREAM_INIT: u64 = 0x696e6974;

/// Which observed gradient is matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DlgTarget {
    Plain,
    VaeMu,
    DsvaeMu,
}

impl DlgTarget {
    pub fn for_head(kind: HeadKind) -> Self {
        match kind {
            HeadKind::Plain => DlgTarget::Plain,
            HeadKind::Vae => DlgTarget::VaeMu,
            HeadKind::Dsvae => DlgTarget::DsvaeMu,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            DlgTarget::Plain => HeadKind::Plain,
            DlgTarget::VaeMu => HeadKind::Vae,
            DlgTarget::DsvaeMu => HeadKind::Dsvae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgConfig {
    /// Optimiser iterations.
    pub steps: usize,
    /// Length of the first (steepest-descent) step; later steps come from
    /// the quasi-Newton model.
    pub lr: f64,
    pub seed: u64,
    pub target: DlgTarget,
    /// Stop once the matching loss falls below this value.
    pub tolerance: f64,
    /// Fresh dummy initialisations tried until one converges; the best
    /// final loss wins otherwise. The attacker's noise draw is shared.
    pub restarts: usize,
}

impl DlgConfig {
    pub fn new(target: DlgTarget, seed: u64) -> Self {
        DlgConfig {
            steps: 300,
            lr: 0.05,
            seed,
            target,
            tolerance: 1e-20,
            restarts: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Domain("DLG needs at least one step and one start".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!("DLG lr {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DlgStatus {
    /// Loss fell below the tolerance.
    Converged,
    /// Step budget exhausted or no further decrease possible.
    Stalled,
    /// The loss became non-finite.
    Diverged,
    /// The observed gradient is zero, so every dummy with a zero replayed
    /// gradient is optimal and the label is undetermined.
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgOutcome {
    pub em: Vec<f64>,
    pub label_logits: Vec<f64>,
    /// `y′ = softmax(q)` at the final iterate.
    pub label_dist: Vec<f64>,
    pub loss_trajectory: Vec<f64>,
    pub final_loss: f64,
    pub status: DlgStatus,
    /// The noise the attacker replayed the head with.
    pub attacker_noise: Option<NoiseDraw>,
}

impl DlgOutcome {
    /// `argmax y′`, or `None` for ambiguous and diverged attacks.
    pub fn predicted(&self) -> Option<usize> {
        match self.status {
            DlgStatus::Ambiguous | DlgStatus::Diverged => None,
            _ => Some(argmax(&self.label_dist)),
        }
    }
}

/// Gradient-matching objective with a fixed attacker noise draw.
pub struct MatchingObjective<'a> {
    params: &'a AdversaryParams,
    w_eff: DenseMatrix,
    masks: Option<DenseMatrix>,
    target: &'a DenseMatrix,
}

/// Replayed quantities at one dummy point.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub pre_activation: Vec<f64>,
    pub z: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub y_dummy: Vec<f64>,
    pub grad: DenseMatrix,
}

impl<'a> MatchingObjective<'a> {
    pub fn new(
        params: &'a AdversaryParams,
        noise: Option<&NoiseDraw>,
        target: &'a DenseMatrix,
    ) -> Result<Self> {
        if target.shape() != params.head.primary().shape() {
            return Err(Error::Dimension(format!(
                "observed gradient {:?} does not match head {:?}",
                target.shape(),
                params.head.primary().shape()
            )));
        }
        let w_eff = effective_weights(&params.head, noise)?;
        let masks = match params.head.kind() {
            HeadKind::Dsvae => Some(
                noise
                    .and_then(|n| n.eps1.clone())
                    .ok_or_else(|| Error::State("DSVAE replay needs ε₁′".into()))?,
            ),
            _ => None,
        };
        Ok(MatchingObjective { params, w_eff, masks, target })
    }

    pub fn dim(&self) -> usize {
        self.params.input_dim() + self.params.n_classes()
    }

    fn mask_row(&self, i: usize, z: &[f64]) -> Vec<f64> {
        match &self.masks {
            Some(m) => z.iter().zip(m.row(i)).map(|(a, b)| a * b).collect(),
            None => z.to_vec(),
        }
    }

    /// Forward replay at `x = [em′; q]`.
    pub fn replay(&self, x: &[f64]) -> Result<Replay> {
        let d = self.params.input_dim();
        let (em, q) = x.split_at(d);
        let mut pre = self.params.w1.matvec(em)?;
        axpy(1.0, &self.params.b1, &mut pre);
        let z: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let y_hat = softmax(&self.w_eff.matvec(&z)?)?;
        let y_dummy = softmax(q)?;
        let n = y_hat.len();
        let mut grad = DenseMatrix::zeros(n, z.len());
        for i in 0..n {
            axpy(y_hat[i] - y_dummy[i], &self.mask_row(i, &z), grad.row_mut(i));
        }
        Ok(Replay { pre_activation: pre, z, y_hat, y_dummy, grad })
    }

    /// Matching loss and its gradient with respect to `[em′; q]`.
    pub fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rp = self.replay(x)?;
        let n = rp.y_hat.len();
        let mut loss = 0.0;
        let mut d_z = vec![0.0; rp.z.len()];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let u = self.mask_row(i, &rp.z);
            let diff: Vec<f64> = rp
                .grad
                .row(i)
                .iter()
                .zip(self.target.row(i))
                .map(|(g, t)| g - t)
                .collect();
            loss += dot(&diff, &diff);
            // R_i = 2(G_i − T_i); r_i = ⟨R_i, u_i⟩
            r[i] = 2.0 * dot(&diff, &u);
            let coef = 2.0 * (rp.y_hat[i] - rp.y_dummy[i]);
            match &self.masks {
                Some(m) => {
                    for k in 0..d_z.len() {
                        d_z[k] += coef * diff[k] * m.get(i, k);
                    }
                }
                None => axpy(coef, &diff, &mut d_z),
            }
        }
        let mean_r = dot(&rp.y_hat, &r);
        let d_s: Vec<f64> = (0..n).map(|i| rp.y_hat[i] * (r[i] - mean_r)).collect();
        axpy(1.0, &self.w_eff.matvec_t(&d_s)?, &mut d_z);
        let d_a: Vec<f64> = d_z
            .iter()
            .zip(&rp.pre_activation)
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        let mut grad = self.params.w1.matvec_t(&d_a)?;
        let mean_neg_r = -dot(&rp.y_dummy, &r);
        grad.extend((0..n).map(|i| rp.y_dummy[i] * (-r[i] - mean_neg_r)));
        Ok((loss, grad))
    }
}

/// Limited-memory BFGS with Armijo backtracking. Returns the final iterate,
/// the loss after every accepted step and the stop reason.
pub(crate) fn lbfgs<F>(
    f: F,
    x0: Vec<f64>,
    max_iter: usize,
    first_step: f64,
    tolerance: f64,
) -> (Vec<f64>, Vec<f64>, DlgStatus)
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;
    let mut x = x0;
    let Some((mut fx, mut g)) = f(&x) else {
        return (x, vec![f64::NAN], DlgStatus::Diverged);
    };
    let mut trajectory = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    for _ in 0..max_iter {
        if fx <= tolerance {
            return (x, trajectory, DlgStatus::Converged);
        }
        let gnorm = norm(&g);
        if gnorm == 0.0 {
            break;
        }
        let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            axpy(-a, y, &mut dir);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            axpy(a - b, s, &mut dir);
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if history.is_empty() { first_step / gnorm } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = x.clone();
            axpy(step, &dir, &mut trial);
            match f(&trial) {
                Some((ft, gt)) if ft <= fx + ARMIJO * step * slope => {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        trajectory.push(fx);
    }
    let status = if fx <= tolerance {
        DlgStatus::Converged
    } else {
        DlgStatus::Stalled
    };
    (x, trajectory, status)
}

/// Gradient matching against an observed final-layer gradient.
pub fn dlg_attack_gradient(
    observed: &FinalLayerGrad,
    snapshot: &AdversaryParams,
    cfg: &DlgConfig,
) -> Result<DlgOutcome> {
    cfg.validate()?;
    if observed.kind() != cfg.target.head() || snapshot.head.kind() != cfg.target.head() {
        return Err(Error::State(format!(
            "DLG target {:?} does not match gradient {:?} / snapshot {:?}",
            cfg.target,
            observed.kind(),
            snapshot.head.kind()
        )));
    }
    let root = RngStream::new(cfg.seed, 0);
    let noise = NoiseDraw::sample(&snapshot.head, &mut root.derive(STREAM_NOISE))?;
    let objective = MatchingObjective::new(snapshot, noise.as_ref(), observed.primary())?;
    let init = |r: usize| {
        sample_gaussian_iid(&mut root.derive_path(&[STREAM_INIT, r as u64]), objective.dim(), 0.0, 1.0)
    };

    let d = snapshot.input_dim();
    let finish = |x: Vec<f64>, trajectory: Vec<f64>, status: DlgStatus| {
        let label_logits = x[d..].to_vec();
        let label_dist = softmax(&label_logits).unwrap_or_else(|_| vec![f64::NAN; label_logits.len()]);
        DlgOutcome {
            em: x[..d].to_vec(),
            label_logits,
            label_dist,
            final_loss: *trajectory.last().unwrap_or(&f64::NAN),
            loss_trajectory: trajectory,
            status,
            attacker_noise: noise.clone(),
        }
    };

    if observed.primary().frobenius_sq() == 0.0 {
        let x0 = init(0)?;
        let (f0, _) = objective.loss_and_grad(&x0)?;
        return Ok(finish(x0, vec![f0], DlgStatus::Ambiguous));
    }
    let eval = |x: &[f64]| match objective.loss_and_grad(x) {
        Ok((l, g)) if l.is_finite() && g.iter().all(|v| v.is_finite()) => Some((l, g)),
        _ => None,
    };
    let mut best: Option<DlgOutcome> = None;
    for r in 0..cfg.restarts {
        let (x, trajectory, status) = lbfgs(eval, init(r)?, cfg.steps, cfg.lr, cfg.tolerance);
        let status = if trajectory.iter().any(|l| !l.is_finite()) {
            DlgStatus::Diverged
        } else {
            status
        };
        let out = finish(x, trajectory, status);
        let better = match &best {
            None => true,
            Some(b) => b.status == DlgStatus::Diverged || (status != DlgStatus::Diverged && out.final_loss < b.final_loss),
        };
        if better {
            best = Some(out);
        }
        if status == DlgStatus::Converged {
            break;
        }
    }
    Ok(best.expect("at least one restart"))
}

/// DLG on a stored record; only the observable gradient is read.
pub fn dlg_attack(
    record: &GradientRecord,
    snapshot: &AdversaryParams,
    cfg: &DlgConfig,
) -> Result<DlgOutcome> {
    dlg_attack_gradient(&record.grads, snapshot, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{backward, forward_with_noise};
    use crate::numkernel::{finite_diff_grad, max_rel_err};

    fn toy(kind: HeadKind, seed: u64) -> (AdversaryParams, FinalLayerGrad, usize) {
        let mut rng = RngStream::new(seed, 0);
        let params = AdversaryParams::init(kind, 4, 6, 2, 4.0, &mut rng).unwrap();
        let em = sample_gaussian_iid(&mut rng, 4, 0.0, 1.0).unwrap();
        let y = (seed % 2) as usize;
        let noise = NoiseDraw::sample(&params.head, &mut rng).unwrap();
        let trace = forward_with_noise(&params, &em, noise).unwrap();
        let (g, _) = backward(&params, &trace, y).unwrap();
        (params, FinalLayerGrad::from_grads(&g), y)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for kind in [HeadKind::Plain, HeadKind::Vae, HeadKind::Dsvae] {
            let (params, observed, _) = toy(kind, 3);
            let mut rng = RngStream::new(9, 9);
            let noise = NoiseDraw::sample(&params.head, &mut rng).unwrap();
            let obj = MatchingObjective::new(&params, noise.as_ref(), observed.primary()).unwrap();
            for _ in 0..5 {
                let x = sample_gaussian_iid(&mut rng, obj.dim(), 0.0, 1.0).unwrap();
                let (_, g) = obj.loss_and_grad(&x).unwrap();
                let fd = finite_diff_grad(|p| obj.loss_and_grad(p).unwrap().0, &x, 1e-6).unwrap();
                assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4, "{kind:?}: {g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn plain_toy_matches_gradient_and_mostly_recovers_label() {
        let (mut hits, mut converged) = (0, 0);
        for seed in 0..10 {
            let (params, observed, y) = toy(HeadKind::Plain, seed);
            let cfg = DlgConfig::new(DlgTarget::Plain, seed + 100);
            let out = dlg_attack_gradient(&observed, &params, &cfg).unwrap();
            assert!(out.loss_trajectory.windows(2).all(|w| w[1] <= w[0]));
            hits += usize::from(out.predicted() == Some(y));
            if out.status != DlgStatus::Converged {
                continue;
            }
            converged += 1;
            let obj = MatchingObjective::new(&params, None, observed.primary()).unwrap();
            let x: Vec<f64> = out.em.iter().chain(&out.label_logits).copied().collect();
            let replay = obj.replay(&x).unwrap();
            for (a, b) in replay.grad.as_slice().iter().zip(observed.primary().as_slice()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        assert!(converged >= 8, "{converged}/10 converged");
        assert!(hits >= 7, "{hits}/10 recovered");
    }

    #[test]
    fn zero_gradient_is_ambiguous() {
        let (params, observed, _) = toy(HeadKind::Plain, 1);
        let zero = FinalLayerGrad::Plain { w: DenseMatrix::zeros(observed.primary().rows(), 6) };
        let out = dlg_attack_gradient(&zero, &params, &DlgConfig::new(DlgTarget::Plain, 0)).unwrap();
        assert_eq!(out.status, DlgStatus::Ambiguous);
        assert_eq!(out.predicted(), None);
    }

    #[test]
    fn target_mismatch_rejected() {
        let (params, observed, _) = toy(HeadKind::Plain, 1);
        let cfg = DlgConfig::new(DlgTarget::DsvaeMu, 0);
        assert!(matches!(dlg_attack_gradient(&observed, &params, &cfg), Err(Error::State(_))));
    }

    #[test]
    fn lbfgs_minimises_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let (x, _, status) = lbfgs(f, vec![-1.2, 1.0], 500, 0.05, 1e-20);
        assert_eq!(status, DlgStatus::Converged);
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
    }
}
