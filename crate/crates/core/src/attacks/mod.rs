//! Privacy attacks: attribute inference from user embeddings, iterative
//! gradient matching (DLG), the iDLG sign rule and closed-form label
//! reconstruction, plus Monte Carlo drivers that score them.

mod dlg;
mod inference;
mod label;

pub use dlg::{
    dlg_attack, dlg_attack_gradient, DlgConfig, DlgOutcome, DlgStatus, DlgTarget,
    MatchingObjective, Replay,
};
pub use inference::{
    infer_attributes, split_users, train_attribute_attacker, AttackSplit, AttackerConfig,
    AttackerMLP,
};
pub use label::{
    closed_form_dsvae, closed_form_label_dsvae, closed_form_label_plain, closed_form_label_vae,
    closed_form_plain, decompose_components, factorized_delta, idlg_from_gradient, idlg_label,
    ComponentReport, IdlgVerdict, ReconstructionResult,
};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    backward, forward_with_noise, AdversaryParams, FinalLayerGrad, Head, HeadKind, NoiseDraw,
};
use crate::error::{Error, Result};
use crate::fedsim::{GradientRecord, GradientStore, RecordOracle};
use crate::numkernel::{sample_gaussian_iid, DenseMatrix, RngStream};
use crate::recmodel::xavier_init;

/// Summary written as one JSON document per attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub head: HeadKind,
    pub trials: usize,
    pub recovery_rate: f64,
    pub mean_delta_error: Option<f64>,
    pub mean_yhat_error: Option<f64>,
}

impl AttackReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Builds the record a client would upload for `(em, y)` under `params`,
/// drawing the forward noise from `rng`.
pub fn simulate_record(
    params: &AdversaryParams,
    em: &[f64],
    y: usize,
    rng: &mut RngStream,
) -> Result<GradientRecord> {
    let noise = NoiseDraw::sample(&params.head, rng)?;
    let trace = forward_with_noise(params, em, noise)?;
    let (grads, _) = backward(params, &trace, y)?;
    Ok(GradientRecord {
        round: 0,
        client: 0,
        head: params.head.kind(),
        grads: FinalLayerGrad::from_grads(&grads),
        oracle: RecordOracle {
            y,
            em_u: em.to_vec(),
            noise: trace.noise,
            probs: trace.probs,
        },
    })
}

/// Shape of randomly generated attack instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub head: HeadKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// Variance of `ε₁` for DSVAE heads.
    pub lambda: f64,
}

/// A generated instance: model, the client's record and its hidden
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub params: AdversaryParams,
    pub record: GradientRecord,
    pub hidden: Vec<f64>,
}

impl TrialSpec {
    /// Instance `trial` of the family identified by `seed`. Every head kind
    /// sees the same `W₁`, `W` (used as `W^μ`), `W^σ`, input and label for a
    /// given `(seed, trial)`; the input is redrawn until at least one hidden
    /// unit is active.
    pub fn instance(&self, seed: u64, trial: u64) -> Result<Instance> {
        let mut rng = RngStream::new(seed, 0).derive(trial);
        let w1 = xavier_init(self.hidden, self.input_dim, &mut rng)?;
        let w = xavier_init(self.n_classes, self.hidden, &mut rng)?;
        let w_sigma = xavier_init(self.n_classes, self.hidden, &mut rng)?;
        let head = match self.head {
            HeadKind::Plain => Head::Plain { w },
            HeadKind::Vae => Head::Vae { w_mu: w, w_sigma },
            HeadKind::Dsvae => Head::Dsvae { w_mu: w, w_sigma, lambda: self.lambda },
        };
        let params = AdversaryParams { w1, b1: vec![0.0; self.hidden], head };
        let y = rand::Rng::random_range(&mut rng, 0..self.n_classes);
        let em = loop {
            let em = sample_gaussian_iid(&mut rng, self.input_dim, 0.0, 1.0)?;
            if params.w1.matvec(&em)?.iter().any(|&a| a > 0.0) {
                break em;
            }
        };
        let record = simulate_record(&params, &em, y, &mut rng.derive(1))?;
        let hidden = params.w1.matvec(&em)?.into_iter().map(|a| a.max(0.0)).collect();
        Ok(Instance { params, record, hidden })
    }
}

/// Per-instance attacker seed.
fn child_seed(seed: u64, index: u64) -> u64 {
    rand::RngCore::next_u64(&mut RngStream::new(seed, 0).derive(index))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// iDLG recovery rate over generated instances.
pub fn idlg_trials(spec: &TrialSpec, trials: usize, seed: u64) -> Result<AttackReport> {
    let hits: Vec<bool> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let inst = spec.instance(seed, t)?;
            Ok(idlg_label(&inst.record).label() == Some(inst.record.oracle.y))
        })
        .collect::<Result<_>>()?;
    Ok(AttackReport {
        attack: "idlg".into(),
        head: spec.head,
        trials,
        recovery_rate: hits.iter().filter(|&&h| h).count() as f64 / trials.max(1) as f64,
        mean_delta_error: None,
        mean_yhat_error: None,
    })
}

/// Per-record result of the full gradient-matching attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgTrial {
    pub client: u32,
    pub outcome: DlgOutcome,
    /// Closed-form reconstruction evaluated at the DLG dummy input.
    pub closed_form: Option<ReconstructionResult>,
    pub components: Option<ComponentReport>,
    pub recovered: bool,
}

/// DLG followed by the closed-form reconstruction at the recovered dummy
/// input; the stored label is only read after both have run.
pub fn attack_record(
    record: &GradientRecord,
    snapshot: &AdversaryParams,
    cfg: &DlgConfig,
) -> Result<DlgTrial> {
    let outcome = dlg_attack(record, snapshot, cfg)?;
    let objective =
        MatchingObjective::new(snapshot, outcome.attacker_noise.as_ref(), record.grads.primary())?;
    let x: Vec<f64> = outcome.em.iter().chain(&outcome.label_logits).copied().collect();
    let closed_form = match objective.replay(&x) {
        Ok(rp) => {
            let r = match (&outcome.attacker_noise, record.head) {
                (Some(NoiseDraw { eps1: Some(e1), .. }), HeadKind::Dsvae) => {
                    closed_form_dsvae(record.grads.primary(), &rp.z, e1, &rp.y_hat)
                }
                _ => closed_form_plain(record.grads.primary(), &rp.z, &rp.y_hat),
            };
            r.ok()
        }
        Err(_) => None,
    };
    let y = record.oracle.y;
    let components = closed_form
        .as_ref()
        .and_then(|r| decompose_components(r, y, &record.oracle.probs).ok());
    Ok(DlgTrial {
        client: record.client,
        recovered: outcome.predicted() == Some(y),
        closed_form: closed_form.map(|r| r.score(y)),
        components,
        outcome,
    })
}

fn summarize(attack: &str, head: HeadKind, trials: &[DlgTrial]) -> AttackReport {
    AttackReport {
        attack: attack.into(),
        head,
        trials: trials.len(),
        recovery_rate: trials.iter().filter(|t| t.recovered).count() as f64
            / trials.len().max(1) as f64,
        mean_delta_error: mean(trials.iter().filter_map(|t| t.components.as_ref()).map(|c| c.mean_delta_error())),
        mean_yhat_error: mean(trials.iter().filter_map(|t| t.components.as_ref()).map(|c| c.mean_yhat_error())),
    }
}

/// Full DLG over generated instances; the attacker's noise and dummy
/// initialisation for trial `t` come from `cfg.seed` mixed with `t`.
pub fn dlg_trials(
    spec: &TrialSpec,
    trials: usize,
    cfg: &DlgConfig,
    seed: u64,
) -> Result<(AttackReport, Vec<DlgTrial>)> {
    let results: Vec<DlgTrial> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let inst = spec.instance(seed, t)?;
            let trial_cfg = DlgConfig {
                seed: child_seed(cfg.seed, t),
                ..cfg.clone()
            };
            attack_record(&inst.record, &inst.params, &trial_cfg)
        })
        .collect::<Result<_>>()?;
    Ok((summarize("dlg", spec.head, &results), results))
}

/// Closed-form reconstruction in oracle mode: the attacker is handed the
/// true head input `z` but replays the head with its own noise draw, so
/// the report isolates what the noise alone hides.
pub fn oracle_component_trials(spec: &TrialSpec, trials: usize, seed: u64) -> Result<AttackReport> {
    let results: Vec<(ComponentReport, bool)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let inst = spec.instance(seed, t)?;
            let mut rng = RngStream::new(seed, 1).derive(t);
            let noise = NoiseDraw::sample(&inst.params.head, &mut rng)?;
            let trace = forward_with_noise(&inst.params, &inst.record.oracle.em_u, noise)?;
            let grad = inst.record.grads.primary();
            let r = match &trace.noise {
                Some(NoiseDraw { eps1: Some(e1), .. }) => {
                    closed_form_dsvae(grad, &trace.hidden, e1, &trace.probs)?
                }
                _ => closed_form_plain(grad, &trace.hidden, &trace.probs)?,
            };
            let y = inst.record.oracle.y;
            Ok((decompose_components(&r, y, &inst.record.oracle.probs)?, r.predicted == y))
        })
        .collect::<Result<_>>()?;
    Ok(AttackReport {
        attack: "closed_form_oracle".into(),
        head: spec.head,
        trials,
        recovery_rate: results.iter().filter(|(_, h)| *h).count() as f64 / trials.max(1) as f64,
        mean_delta_error: mean(results.iter().map(|(c, _)| c.mean_delta_error())),
        mean_yhat_error: mean(results.iter().map(|(c, _)| c.mean_yhat_error())),
    })
}

/// Runs DLG against every record in the store, each with the snapshot of
/// its own round.
pub fn attack_store(store: &GradientStore, cfg: &DlgConfig) -> Result<(AttackReport, Vec<DlgTrial>)> {
    let records: Vec<&GradientRecord> = store.latest.values().collect();
    let head = records
        .first()
        .map(|r| r.head)
        .ok_or_else(|| Error::State("gradient store is empty".into()))?;
    let results: Vec<DlgTrial> = records
        .par_iter()
        .map(|r| {
            let snapshot = store.snapshot_for(r)?;
            let trial_cfg = DlgConfig {
                seed: child_seed(cfg.seed, u64::from(r.client)),
                ..cfg.clone()
            };
            attack_record(r, snapshot, &trial_cfg)
        })
        .collect::<Result<_>>()?;
    Ok((summarize("dlg", head, &results), results))
}

/// iDLG sign rule against every record in the store.
pub fn idlg_store(store: &GradientStore) -> Result<AttackReport> {
    let records: Vec<&GradientRecord> = store.latest.values().collect();
    let head = records
        .first()
        .map(|r| r.head)
        .ok_or_else(|| Error::State("gradient store is empty".into()))?;
    let hits = records
        .iter()
        .filter(|r| idlg_label(r).label() == Some(r.oracle.y))
        .count();
    Ok(AttackReport {
        attack: "idlg".into(),
        head,
        trials: records.len(),
        recovery_rate: hits as f64 / records.len() as f64,
        mean_delta_error: None,
        mean_yhat_error: None,
    })
}

/// Convenience for tests and benches: the true `(z, ε₁)` behind a record.
pub fn record_internals(params: &AdversaryParams, record: &GradientRecord) -> Result<(Vec<f64>, Option<DenseMatrix>)> {
    let trace = forward_with_noise(params, &record.oracle.em_u, record.oracle.noise.clone())?;
    Ok((trace.hidden, record.oracle.noise.as_ref().and_then(|n| n.eps1.clone())))
}
