//! Federated orchestration: client sampling, local updates, FedAvg of the
//! shared parameters and capture of final-layer adversary gradients.
//!
//! User embeddings live only in [`ClientState`]; [`GlobalState`] holds the
//! item embeddings, the scorer and the adversary, which is everything the
//! server sees.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    adversarial_step, AdversaryParams, FinalLayerGrad, HeadKind, NoiseDraw, SutConfig,
};
use crate::data::IndexedDataset;
use crate::error::{Error, Result};
use crate::numkernel::{axpy, DenseMatrix, RngStream};
use crate::recmodel::{rec_loss_and_grads, sgd_step, ItemEmbeddings, ScorerParams};

/// RNG purpose tags.
const TAG_SAMPLE: u64 = 1;
const TAG_LOCAL: u64 = 2;

/// Server-side model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub items: ItemEmbeddings,
    pub scorer: ScorerParams,
    pub adversary: Option<AdversaryParams>,
    pub round: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Default weight of the adversarial term in the client objective.
pub const DEFAULT_ADV_WEIGHT: f64 = 0.03;

/// Versioned JSON checkpoint of a [`GlobalState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state: GlobalState,
}

impl GlobalState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck.state)
    }
}

/// One user's device.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    /// Dense index into the dataset.
    pub index: usize,
    pub user: u32,
    pub em_u: Vec<f64>,
    pub y: usize,
    /// Sorted training item indices.
    pub train: Vec<usize>,
}

/// Hyperparameters of local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub lr: f64,
    pub lr_adv: f64,
    pub negatives: usize,
    pub sample_fraction: f64,
    pub local_epochs: usize,
    /// Weight of the adversarial term; the reversed gradient reaching the
    /// embedding is scaled by `lambda_adv · ε_u`.
    pub lambda_adv: f64,
    pub sut: SutConfig,
    /// Rounds during which the adversary trains but never reverses.
    pub pretrain_rounds: u64,
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            lr: 0.1,
            lr_adv: 0.1,
            negatives: crate::recmodel::DEFAULT_NEGATIVES,
            sample_fraction: 0.1,
            local_epochs: 1,
            lambda_adv: DEFAULT_ADV_WEIGHT,
            sut: SutConfig::default(),
            pretrain_rounds: 0,
            parallel: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_adv > 0.0) {
            return Err(Error::Domain("learning rates must be > 0".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "sample fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Domain("local_epochs must be >= 1".into()));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::Domain("lambda_adv must be >= 0".into()));
        }
        self.sut.validate()
    }
}

/// What the honest-but-curious server may not see but the evaluation
/// harness needs: the true label and the exact forward inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOracle {
    pub y: usize,
    pub em_u: Vec<f64>,
    pub noise: Option<NoiseDraw>,
    pub probs: Vec<f64>,
}

/// Final-layer adversary gradient uploaded by one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub round: u64,
    pub client: u32,
    pub head: HeadKind,
    pub grads: FinalLayerGrad,
    /// Ground truth for scoring attacks; attack routines never read it.
    pub oracle: RecordOracle,
}

/// Sparse parameter delta sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedDelta {
    pub items: BTreeMap<usize, Vec<f64>>,
    pub scorer: ScorerParams,
    pub adversary: Option<AdversaryParams>,
}

/// Everything a client returns from one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub index: usize,
    pub em_u: Vec<f64>,
    pub delta: SharedDelta,
    pub record: Option<GradientRecord>,
    pub rec_loss: f64,
    pub adv_loss: Option<f64>,
    pub skipped: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub sampled: Vec<u32>,
    pub mean_rec_loss: f64,
    pub mean_adv_loss: Option<f64>,
    /// Fraction of sampled clients with `ε_u = 0`; 0 without an adversary.
    pub skip_rate: f64,
}

/// `⌈fraction · n⌉` distinct indices drawn uniformly, returned sorted.
pub fn sample_clients(n_users: usize, fraction: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n_users == 0 {
        return Err(Error::Domain("cannot sample from an empty user set".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n_users as f64).ceil() as usize).min(n_users);
    let mut picked = sample(rng, n_users, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One local epoch (or `cfg.local_epochs`) for `client` against `snapshot`.
pub fn local_update(
    client: &ClientState,
    snapshot: &GlobalState,
    cfg: &FedConfig,
    rng: &mut RngStream,
) -> Result<ClientUpdate> {
    let mut em_u = client.em_u.clone();
    let mut items = snapshot.items.clone();
    let mut scorer = snapshot.scorer.clone();
    let mut adversary = snapshot.adversary.clone();
    let mut touched: BTreeSet<usize> = BTreeSet::new();
    let mut record = None;
    let mut rec_losses = Vec::with_capacity(cfg.local_epochs);
    let mut adv_loss = None;
    let mut skipped = None;
    let pretraining = snapshot.round < cfg.pretrain_rounds;

    for epoch in 0..cfg.local_epochs {
        let rec = rec_loss_and_grads(&em_u, &client.train, &items, &scorer, cfg.negatives, rng)?;
        rec_losses.push(rec.mean_loss());
        let mut grad_user = rec.grad_user;

        if let Some(adv) = adversary.as_mut() {
            let out = adversarial_step(
                &em_u,
                client.y,
                adv,
                &cfg.sut,
                cfg.lambda_adv,
                pretraining,
                rng,
            )?;
            if epoch == 0 {
                record = Some(GradientRecord {
                    round: snapshot.round,
                    client: client.user,
                    head: adv.head.kind(),
                    grads: FinalLayerGrad::from_grads(&out.param_grads),
                    oracle: RecordOracle {
                        y: client.y,
                        em_u: em_u.clone(),
                        noise: out.trace.noise.clone(),
                        probs: out.trace.probs.clone(),
                    },
                });
                skipped = Some(out.skipped);
            }
            adv_loss = Some(out.loss);
            axpy(1.0, &out.embedding_grad, &mut grad_user);
            let mut flat = adv.flatten();
            sgd_step(&mut flat, &out.param_grads.flatten(), cfg.lr_adv)?;
            *adv = adv.unflatten(&flat)?;
        }

        sgd_step(&mut em_u, &grad_user, cfg.lr)?;
        for (&row, g) in &rec.grad_items {
            sgd_step(items.row_mut(row), g, cfg.lr)?;
            touched.insert(row);
        }
        let mut flat = scorer.flatten();
        if !flat.is_empty() {
            sgd_step(&mut flat, &rec.grad_scorer.flatten(), cfg.lr)?;
            scorer = scorer.unflatten(&flat)?;
        }
    }

    let item_delta = touched
        .into_iter()
        .map(|r| {
            let d: Vec<f64> = items
                .row(r)
                .iter()
                .zip(snapshot.items.row(r))
                .map(|(a, b)| a - b)
                .collect();
            (r, d)
        })
        .collect();
    let mut scorer_delta = scorer;
    scorer_delta.add_scaled(-1.0, &snapshot.scorer)?;
    let adversary_delta = match (adversary, &snapshot.adversary) {
        (Some(mut a), Some(s)) => {
            a.add_scaled(-1.0, s)?;
            Some(a)
        }
        _ => None,
    };
    Ok(ClientUpdate {
        index: client.index,
        em_u,
        delta: SharedDelta {
            items: item_delta,
            scorer: scorer_delta,
            adversary: adversary_delta,
        },
        record,
        rec_loss: rec_losses.iter().sum::<f64>() / rec_losses.len() as f64,
        adv_loss,
        skipped,
    })
}

/// Weighted FedAvg: `θ ← θ + Σ w_k Δ_k / Σ w_k`, applied in the given order.
pub fn aggregate(snapshot: &GlobalState, deltas: &[&SharedDelta], weights: &[f64]) -> Result<GlobalState> {
    if deltas.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Domain("aggregation weights must be >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut next = snapshot.clone();
    next.round += 1;
    if deltas.is_empty() {
        return Ok(next);
    }
    if !(total > 0.0) {
        return Err(Error::Domain("aggregation weights are all zero".into()));
    }
    let d = snapshot.items.cols();
    for (delta, &w) in deltas.iter().zip(weights) {
        let a = w / total;
        for (&row, v) in &delta.items {
            if row >= next.items.rows() || v.len() != d {
                return Err(Error::Dimension(format!("item delta row {row} has bad shape")));
            }
            axpy(a, v, next.items.row_mut(row));
        }
        next.scorer.add_scaled(a, &delta.scorer)?;
        match (next.adversary.as_mut(), &delta.adversary) {
            (Some(adv), Some(dadv)) => adv.add_scaled(a, dadv)?,
            (None, None) => {}
            _ => return Err(Error::Dimension("adversary presence differs".into())),
        }
    }
    Ok(next)
}

/// Latest gradient per client plus the adversary snapshot each was computed
/// against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStore {
    pub latest: BTreeMap<u32, GradientRecord>,
    pub snapshots: BTreeMap<u64, AdversaryParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum StoreLine {
    Snapshot { round: u64, adversary: AdversaryParams },
    Record(GradientRecord),
}

impl GradientStore {
    pub fn observe(&mut self, snapshot: &AdversaryParams, records: Vec<GradientRecord>) {
        if records.is_empty() {
            return;
        }
        let round = records[0].round;
        self.snapshots.insert(round, snapshot.clone());
        for r in records {
            self.latest.insert(r.client, r);
        }
        let live: BTreeSet<u64> = self.latest.values().map(|r| r.round).collect();
        self.snapshots.retain(|r, _| live.contains(r));
    }

    pub fn snapshot_for(&self, record: &GradientRecord) -> Result<&AdversaryParams> {
        self.snapshots.get(&record.round).ok_or_else(|| {
            Error::State(format!("no model snapshot for round {}", record.round))
        })
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    /// JSON-lines: snapshot lines first (ascending round), then one record
    /// line per client (ascending client id).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (&round, adv) in &self.snapshots {
            let line = StoreLine::Snapshot { round, adversary: adv.clone() };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        for r in self.latest.values() {
            let line = StoreLine::Record(r.clone());
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Replays a JSON-lines store; later lines supersede earlier ones.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = GradientStore::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<StoreLine>(&line)? {
                StoreLine::Snapshot { round, adversary } => {
                    store.snapshots.insert(round, adversary);
                }
                StoreLine::Record(r) => {
                    store.latest.insert(r.client, r);
                }
            }
        }
        Ok(store)
    }
}

/// Runs one round: sample, local updates against a frozen snapshot,
/// ordered aggregation.
pub fn run_round(
    state: &GlobalState,
    clients: &mut [ClientState],
    cfg: &FedConfig,
    rng: &RngStream,
) -> Result<(GlobalState, RoundLog, Vec<GradientRecord>)> {
    let mut sample_rng = rng.derive_path(&[TAG_SAMPLE, state.round]);
    let picked = sample_clients(clients.len(), cfg.sample_fraction, &mut sample_rng)?;
    let run_one = |&i: &usize| {
        let mut local_rng = rng.derive_path(&[TAG_LOCAL, state.round, i as u64]);
        local_update(&clients[i], state, cfg, &mut local_rng)
    };
    let updates: Vec<ClientUpdate> = if cfg.parallel {
        picked.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        picked.iter().map(run_one).collect::<Result<_>>()?
    };

    let deltas: Vec<&SharedDelta> = updates.iter().map(|u| &u.delta).collect();
    let next = aggregate(state, &deltas, &vec![1.0; deltas.len()])?;

    let n = updates.len() as f64;
    let mean_rec_loss = updates.iter().map(|u| u.rec_loss).sum::<f64>() / n;
    let adv: Vec<f64> = updates.iter().filter_map(|u| u.adv_loss).collect();
    let mean_adv_loss = (!adv.is_empty()).then(|| adv.iter().sum::<f64>() / adv.len() as f64);
    let skip_rate = updates.iter().filter(|u| u.skipped == Some(true)).count() as f64 / n;
    let log = RoundLog {
        round: state.round,
        sampled: picked.iter().map(|&i| clients[i].user).collect(),
        mean_rec_loss,
        mean_adv_loss,
        skip_rate,
    };

    let mut records = Vec::new();
    for u in updates {
        clients[u.index].em_u = u.em_u;
        records.extend(u.record);
    }
    Ok((next, log, records))
}

/// Initial state and clients for a dataset.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub state: GlobalState,
    pub clients: Vec<ClientState>,
    pub cfg: FedConfig,
    pub rng: RngStream,
    pub logs: Vec<RoundLog>,
    pub store: GradientStore,
    /// Stop updating `store` after this round (the attack window).
    pub store_until: Option<u64>,
}

impl Simulation {
    pub fn new(
        data: &IndexedDataset,
        dim: usize,
        scorer: ScorerParams,
        adversary: Option<AdversaryParams>,
        cfg: FedConfig,
        rng: RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(a) = &adversary {
            if a.input_dim() != dim || a.n_classes() != data.n_classes {
                return Err(Error::Dimension(
                    "adversary shape does not match embedding dim / classes".into(),
                ));
            }
        }
        let mut init_rng = rng.derive(0);
        let items = crate::recmodel::xavier_init(data.n_items(), dim, &mut init_rng)?;
        let users = crate::recmodel::xavier_init(data.n_users(), dim, &mut init_rng)?;
        let clients = (0..data.n_users())
            .map(|i| ClientState {
                index: i,
                user: data.user_ids[i],
                em_u: users.row(i).to_vec(),
                y: data.labels[i],
                train: data.train[i].clone(),
            })
            .collect();
        Ok(Simulation {
            state: GlobalState {
                items,
                scorer,
                adversary,
                round: 0,
            },
            clients,
            cfg,
            rng,
            logs: Vec::new(),
            store: GradientStore::default(),
            store_until: None,
        })
    }

    pub fn step(&mut self) -> Result<&RoundLog> {
        let snapshot_adv = self.state.adversary.clone();
        let (next, log, records) = run_round(&self.state, &mut self.clients, &self.cfg, &self.rng)?;
        let in_window = self.store_until.is_none_or(|r| log.round < r);
        if let (Some(adv), true) = (snapshot_adv, in_window) {
            self.store.observe(&adv, records);
        }
        self.state = next;
        self.logs.push(log);
        Ok(self.logs.last().expect("just pushed"))
    }

    pub fn run(&mut self, rounds: u64) -> Result<()> {
        for _ in 0..rounds {
            self.step()?;
        }
        Ok(())
    }

    pub fn user_embeddings(&self) -> DenseMatrix {
        let d = self.state.items.cols();
        let data = self.clients.iter().flat_map(|c| c.em_u.iter().copied()).collect();
        DenseMatrix::from_vec(self.clients.len(), d, data).expect("consistent dims")
    }
}
