use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryParams, HeadKind, SutMode};
use crate::attacks::{attack_store, infer_attributes, train_attribute_attacker, AttackReport, DlgConfig, DlgTarget};
use crate::data::{
    balance_gender, discretize_age, filter_kcore, leave_one_out_split, parse_movielens, parse_users,
    Dataset, IndexedDataset, UserAttribute,
};
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, SourceKind};
use crate::experiment::metrics::{bacc, f1_micro, hr_at_k, ndcg_at_k, rank_all, CUTOFFS};
use crate::fedsim::{FedConfig, GlobalState, GradientStore, RoundLog, Simulation};
use crate::numkernel::{DenseMatrix, RngStream};
use crate::recmodel::ScorerParams;

const TAG_DATA: u64 = 10;
const TAG_TRAIN: u64 = 11;
const TAG_INIT: u64 = 12;
const TAG_RANK: u64 = 13;
const TAG_ATTACK: u64 = 14;
const TAG_DLG: u64 = 15;

/// Builds the (split) dataset described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let root = RngStream::new(cfg.run.seed, 0);
    let section = &cfg.dataset;
    let ds = match section.source {
        SourceKind::Prepared => return Dataset::load_json(&section.prepared),
        SourceKind::Synth => section.synth.generate(&mut root.derive(TAG_DATA))?,
        SourceKind::Movielens => {
            let ml = &section.movielens;
            let ratings = parse_movielens(&ml.ratings, ml.format)?;
            let (users, _) = parse_users(&ml.users, ml.format)?;
            let mut attributes = BTreeMap::new();
            for u in users {
                let age_bucket = discretize_age(u.age, ml.thresholds())?;
                attributes.insert(u.user, UserAttribute { user: u.user, gender: u.gender, age_bucket });
            }
            let joined = Dataset::from_parts(ratings.interactions, attributes.clone())?;
            let core = filter_kcore(&joined.interactions, ml.min_user, ml.min_item)?;
            Dataset::from_parts(core, attributes)?
        }
    };
    let ds = if section.balance {
        balance_gender(&ds, &mut root.derive(TAG_DATA + 100))?
    } else {
        ds
    };
    leave_one_out_split(&ds)
}

/// Everything the evaluation stage needs.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub data: IndexedDataset,
    pub state: GlobalState,
    pub user_embeddings: DenseMatrix,
    pub store: GradientStore,
    pub logs: Vec<RoundLog>,
}

const RUN_CHECKPOINT_VERSION: u32 = 1;

/// Global model plus every client's embedding, as held by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub state: GlobalState,
    pub user_embeddings: DenseMatrix,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: RunCheckpoint = serde_json::from_str(&text)?;
        if ck.version != RUN_CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {RUN_CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

impl TrainedRun {
    pub fn checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            version: RUN_CHECKPOINT_VERSION,
            state: self.state.clone(),
            user_embeddings: self.user_embeddings.clone(),
        }
    }

    /// Rebuilds an evaluable run from a checkpoint; the gradient store and
    /// round logs are left empty.
    pub fn from_checkpoint(data: IndexedDataset, ck: RunCheckpoint) -> Result<Self> {
        if ck.user_embeddings.rows() != data.n_users() || ck.state.items.rows() != data.n_items() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} users and {} items, dataset has {} and {}",
                ck.user_embeddings.rows(),
                ck.state.items.rows(),
                data.n_users(),
                data.n_items()
            )));
        }
        Ok(TrainedRun {
            data,
            state: ck.state,
            user_embeddings: ck.user_embeddings,
            store: GradientStore::default(),
            logs: Vec::new(),
        })
    }
}

fn fed_config(cfg: &ExperimentConfig) -> FedConfig {
    FedConfig {
        lr: cfg.model.lr,
        lr_adv: cfg.adversary.lr,
        negatives: cfg.model.negatives,
        sample_fraction: cfg.model.sample_fraction,
        local_epochs: cfg.model.local_epochs,
        lambda_adv: cfg.adversary.weight,
        sut: cfg.sut.to_config(),
        pretrain_rounds: cfg.adversary.pretrain_rounds,
        parallel: cfg.run.parallel,
    }
}

/// Initialises and runs federated training on `data`.
pub fn train_on(cfg: &ExperimentConfig, data: IndexedDataset) -> Result<TrainedRun> {
    let root = RngStream::new(cfg.run.seed, 0);
    let mut init = root.derive(TAG_INIT);
    let scorer = ScorerParams::init(cfg.model.scorer, cfg.model.dim, cfg.model.scorer_hidden, &mut init)?;
    let adversary = if cfg.adversary.enabled {
        Some(AdversaryParams::init(
            cfg.adversary.head,
            cfg.model.dim,
            cfg.adversary.hidden,
            data.n_classes,
            cfg.adversary.lambda,
            &mut init,
        )?)
    } else {
        None
    };
    let mut sim = Simulation::new(
        &data,
        cfg.model.dim,
        scorer,
        adversary,
        fed_config(cfg),
        root.derive(TAG_TRAIN),
    )?;
    sim.store_until = Some(cfg.attack.dlg_round);
    sim.run(cfg.model.rounds)?;
    Ok(TrainedRun {
        user_embeddings: sim.user_embeddings(),
        data,
        state: sim.state,
        store: sim.store,
        logs: sim.logs,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    let ds = load_dataset(cfg)?;
    train_on(cfg, ds.index(cfg.dataset.attribute))
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub head: String,
    pub sut_mode: String,
    pub lambda: Option<f64>,
    /// HR at 5, 10, 15 and 20.
    pub hr: [f64; 4],
    /// NDCG at 5, 10, 15 and 20.
    pub ndcg: [f64; 4],
    pub f1: f64,
    pub bacc: f64,
    pub grad_attack_acc: Option<f64>,
    pub skip_rate_series: Vec<f64>,
}

impl MetricReport {
    pub fn skip_rate_mean(&self) -> f64 {
        if self.skip_rate_series.is_empty() {
            0.0
        } else {
            self.skip_rate_series.iter().sum::<f64>() / self.skip_rate_series.len() as f64
        }
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.ndcg[i])
    }
}

/// Fixed CSV layout of [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub seed: u64,
    pub head: String,
    pub sut_mode: String,
    pub lambda: Option<f64>,
    pub hr5: f64,
    pub hr10: f64,
    pub hr15: f64,
    pub hr20: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg15: f64,
    pub ndcg20: f64,
    pub f1: f64,
    pub bacc: f64,
    pub grad_attack_acc: Option<f64>,
    pub skip_rate_mean: f64,
}

impl From<&MetricReport> for CsvRow {
    fn from(r: &MetricReport) -> Self {
        CsvRow {
            run_id: r.run_id.clone(),
            seed: r.seed,
            head: r.head.clone(),
            sut_mode: r.sut_mode.clone(),
            lambda: r.lambda,
            hr5: r.hr[0],
            hr10: r.hr[1],
            hr15: r.hr[2],
            hr20: r.hr[3],
            ndcg5: r.ndcg[0],
            ndcg10: r.ndcg[1],
            ndcg15: r.ndcg[2],
            ndcg20: r.ndcg[3],
            f1: r.f1,
            bacc: r.bacc,
            grad_attack_acc: r.grad_attack_acc,
            skip_rate_mean: r.skip_rate_mean(),
        }
    }
}

pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Concatenates metrics tables, keeping the first row seen per run id.
pub fn merge_reports(paths: &[PathBuf]) -> Result<Vec<CsvRow>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in paths {
        for row in read_csv(p)? {
            if seen.insert(row.run_id.clone()) {
                out.push(row);
            }
        }
    }
    Ok(out)
}

/// Result of the gradient attack against the stored records.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAttack {
    pub report: AttackReport,
}

fn sut_label(cfg: &ExperimentConfig) -> String {
    if !cfg.adversary.enabled {
        return "none".into();
    }
    match cfg.sut.mode {
        SutMode::Binary => "binary",
        SutMode::Continuous => "continuous",
        SutMode::Always => "always",
    }
    .into()
}

/// DLG settings derived from the attack section.
pub fn dlg_config(cfg: &ExperimentConfig) -> DlgConfig {
    DlgConfig {
        steps: cfg.attack.dlg_steps,
        lr: cfg.attack.dlg_lr,
        restarts: cfg.attack.dlg_restarts,
        ..DlgConfig::new(
            DlgTarget::for_head(cfg.adversary.head),
            rand::RngCore::next_u64(&mut RngStream::new(cfg.run.seed, 0).derive(TAG_DLG)),
        )
    }
}

/// Runs the gradient attack on the run's stored records, if any.
pub fn gradient_attack(cfg: &ExperimentConfig, run: &TrainedRun) -> Result<Option<AttackReport>> {
    if !cfg.adversary.enabled || !cfg.attack.gradient_attack || run.store.is_empty() {
        return Ok(None);
    }
    Ok(Some(attack_store(&run.store, &dlg_config(cfg))?.0))
}

/// Attribute inference BAcc and micro-F1 averaged over repeated
/// shadow/eval splits.
pub fn attribute_attack(cfg: &ExperimentConfig, run: &TrainedRun) -> Result<(f64, f64)> {
    let users = &run.user_embeddings;
    let labels = &run.data.labels;
    let (mut sum_bacc, mut sum_f1) = (0.0, 0.0);
    for r in 0..cfg.attack.attacker_repeats {
        let mut rng = RngStream::new(cfg.run.seed, 0).derive_path(&[TAG_ATTACK, r as u64]);
        let (attacker, split) =
            train_attribute_attacker(users, labels, run.data.n_classes, &cfg.attack.attacker, &mut rng)?;
        let pred = infer_attributes(&attacker, users)?;
        let p: Vec<usize> = split.eval.iter().map(|&u| pred[u]).collect();
        let t: Vec<usize> = split.eval.iter().map(|&u| labels[u]).collect();
        sum_bacc += bacc(&p, &t, run.data.n_classes)?;
        sum_f1 += f1_micro(&p, &t)?;
    }
    let n = cfg.attack.attacker_repeats as f64;
    Ok((sum_bacc / n, sum_f1 / n))
}

/// HR and NDCG at every cut-off.
pub fn ranking_metrics(cfg: &ExperimentConfig, run: &TrainedRun) -> Result<([f64; 4], [f64; 4])> {
    let ranks = rank_all(
        &run.user_embeddings,
        &run.data.train,
        &run.data.test,
        &run.state.items,
        &run.state.scorer,
        cfg.attack.candidates,
        &RngStream::new(cfg.run.seed, 0).derive(TAG_RANK),
    )?;
    let mut hr = [0.0; 4];
    let mut ndcg = [0.0; 4];
    for (i, &k) in CUTOFFS.iter().enumerate() {
        hr[i] = hr_at_k(&ranks, k)?;
        ndcg[i] = ndcg_at_k(&ranks, k)?;
    }
    Ok((hr, ndcg))
}

pub fn evaluate(cfg: &ExperimentConfig, run: &TrainedRun) -> Result<(MetricReport, Option<AttackReport>)> {
    let (hr, ndcg) = ranking_metrics(cfg, run)?;
    let (bacc, f1) = attribute_attack(cfg, run)?;
    let grad = gradient_attack(cfg, run)?;
    let report = MetricReport {
        run_id: cfg.run_id(),
        seed: cfg.run.seed,
        head: cfg.head_label(),
        sut_mode: sut_label(cfg),
        lambda: (cfg.adversary.enabled && cfg.adversary.head == HeadKind::Dsvae)
            .then_some(cfg.adversary.lambda),
        hr,
        ndcg,
        f1,
        bacc,
        grad_attack_acc: grad.as_ref().map(|g| g.recovery_rate),
        skip_rate_series: run.logs.iter().map(|l| l.skip_rate).collect(),
    };
    Ok((report, grad))
}

/// Run manifest; contains no wall-clock data so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub rounds: u64,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub round_logs: Vec<RoundLog>,
}

/// Paths of a run's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub gradients: PathBuf,
    pub checkpoint: PathBuf,
    pub attack_report: PathBuf,
}

impl RunPaths {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let dir = cfg.run.out_dir.join(cfg.run_id());
        RunPaths {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            gradients: dir.join("gradients.jsonl"),
            checkpoint: dir.join("checkpoint.json"),
            attack_report: dir.join("dlg_report.json"),
            dir,
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Data → federated training → attacks → metrics, writing every artifact
/// under `out_dir/<run_id>/`. A failure still leaves a manifest naming the
/// stage that failed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let paths = RunPaths::for_config(cfg);
    std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let mut manifest = RunManifest {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        rounds: cfg.model.rounds,
        status: "failed".into(),
        failed_stage: None,
        error: None,
        config: cfg.clone(),
        round_logs: Vec::new(),
    };
    let fail = |manifest: &mut RunManifest, stage: &str, err: Error| -> Error {
        manifest.failed_stage = Some(stage.into());
        manifest.error = Some(err.to_string());
        let _ = write_json(manifest, &paths.manifest);
        err
    };

    let data = match load_dataset(cfg) {
        Ok(ds) => ds.index(cfg.dataset.attribute),
        Err(e) => return Err(fail(&mut manifest, "data", e)),
    };
    let run = match train_on(cfg, data) {
        Ok(r) => r,
        Err(e) => return Err(fail(&mut manifest, "train", e)),
    };
    manifest.round_logs = run.logs.clone();
    let (report, grad) = match evaluate(cfg, &run) {
        Ok(r) => r,
        Err(e) => return Err(fail(&mut manifest, "evaluate", e)),
    };
    let written = (|| -> Result<()> {
        write_csv(&[CsvRow::from(&report)], &paths.metrics)?;
        if cfg.run.write_checkpoint {
            run.checkpoint().save(&paths.checkpoint)?;
        }
        if cfg.run.write_gradients && !run.store.is_empty() {
            run.store.write_jsonl(&paths.gradients)?;
        }
        if let Some(g) = &grad {
            g.write_json(&paths.attack_report)?;
        }
        Ok(())
    })();
    if let Err(e) = written {
        return Err(fail(&mut manifest, "write", e));
    }
    manifest.status = "ok".into();
    write_json(&manifest, &paths.manifest)?;
    Ok(report)
}

/// `run.repeats` runs with seeds `seed, seed + 1, …`.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    (0..cfg.run.repeats as u64)
        .map(|r| {
            let mut c = cfg.clone();
            c.run.seed = cfg.run.seed + r;
            run_experiment(&c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ndcg10: f64,
    pub bacc: f64,
    pub grad_attack_acc: Option<f64>,
}

/// One DSVAE run per `λ`, all with the config's seed.
pub fn sweep_lambda(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Domain(format!("λ = {l} must be >= 0")));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.adversary.enabled = true;
            c.adversary.head = HeadKind::Dsvae;
            c.adversary.lambda = lambda;
            let r = run_experiment(&c)?;
            Ok(SweepRow {
                lambda,
                ndcg10: r.ndcg[1],
                bacc: r.bacc,
                grad_attack_acc: r.grad_attack_acc,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
