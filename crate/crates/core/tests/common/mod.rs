//! Checks shared by the acceptance target and the per-topic test files.
//! Every check returns whether it passed plus a one-line summary.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use attrunlearn::adversary::{
    backward, ce_loss, forward_with_noise, AdversaryParams, HeadKind, NoiseDraw,
};
use attrunlearn::attacks::{
    attack_record, closed_form_dsvae, closed_form_label_plain, closed_form_plain, dlg_trials,
    factorized_delta, idlg_trials, DlgConfig, DlgStatus, DlgTarget, MatchingObjective, TrialSpec,
};
use attrunlearn::data::{filter_kcore, leave_one_out_split, Dataset, Interaction, UserAttribute};
use attrunlearn::experiment::config::ExperimentConfig;
use attrunlearn::experiment::metrics::{
    accuracy, bacc, f1_micro, hr_at_k, ndcg_at_k, rank_all, Candidates,
};
use attrunlearn::experiment::run::{
    load_dataset, run_experiment, sweep_lambda, train_on, MetricReport, RunPaths,
};
use attrunlearn::numkernel::{sample_gaussian_iid, DenseMatrix, RngStream};
use attrunlearn::recmodel::{bce_loss_and_grads, ScorerKind, ScorerParams};
use rand::Rng;

pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check { passed, detail: detail.into() }
    }

    fn within(self, start: Instant, limit: Duration) -> Self {
        let elapsed = start.elapsed();
        let ok = elapsed <= limit;
        Check {
            passed: self.passed && ok,
            detail: format!(
                "{}; {:.1}s (limit {}s{})",
                self.detail,
                elapsed.as_secs_f64(),
                limit.as_secs(),
                if ok { "" } else { ", exceeded" }
            ),
        }
    }
}

/// Central differences, written out independently of the library helper.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let fp = f(&p);
            p[i] = o - h;
            let fm = f(&p);
            p[i] = o;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, floor)`.
pub fn worst_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;
/// Instances with a ReLU input closer than this to zero are skipped: central
/// differences straddling the kink do not estimate either one-sided slope.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(pre: &[f64]) -> bool {
    pre.iter().any(|v| v.abs() < KINK_MARGIN)
}

/// Relative error of the BCE path's user, item and scorer gradients on one
/// random instance, or `None` if the instance sits on a ReLU kink.
pub fn bce_gradient_error(kind: ScorerKind, seed: u64) -> Option<f64> {
    let mut rng = RngStream::new(seed, 0);
    let dim = rng.random_range(2..7);
    let n_items = rng.random_range(3..10);
    let items = DenseMatrix::from_vec(n_items, dim, sample_gaussian_iid(&mut rng, n_items * dim, 0.0, 0.5).unwrap()).unwrap();
    let em_u = sample_gaussian_iid(&mut rng, dim, 0.0, 0.5).unwrap();
    let scorer = ScorerParams::init(kind, dim, 5, &mut rng).unwrap();
    let examples: Vec<(usize, f64)> = (0..rng.random_range(1..8))
        .map(|_| (rng.random_range(0..n_items), f64::from(rng.random_range(0..2u8))))
        .collect();
    if let ScorerParams::Mlp(m) = &scorer {
        for &(i, _) in &examples {
            let pre = m.w1.matvec(&[em_u.as_slice(), items.row(i)].concat()).unwrap();
            let pre: Vec<f64> = pre.iter().zip(&m.b1).map(|(a, b)| a + b).collect();
            if near_kink(&pre) {
                return None;
            }
        }
    }
    let g = bce_loss_and_grads(&em_u, &examples, &items, &scorer).unwrap();

    let fu = central_diff(|x| bce_loss_and_grads(x, &examples, &items, &scorer).unwrap().loss, &em_u, FD_STEP);
    let mut worst = worst_rel(&g.grad_user, &fu, FD_FLOOR);

    for (&row, grad_row) in &g.grad_items {
        let fi = central_diff(
            |x| {
                let mut it = items.clone();
                it.row_mut(row).copy_from_slice(x);
                bce_loss_and_grads(&em_u, &examples, &it, &scorer).unwrap().loss
            },
            items.row(row),
            FD_STEP,
        );
        worst = worst.max(worst_rel(grad_row, &fi, FD_FLOOR));
    }
    let flat = scorer.flatten();
    if !flat.is_empty() {
        let fs = central_diff(
            |x| bce_loss_and_grads(&em_u, &examples, &items, &scorer.unflatten(x).unwrap()).unwrap().loss,
            &flat,
            FD_STEP,
        );
        worst = worst.max(worst_rel(&g.grad_scorer.flatten(), &fs, FD_FLOOR));
    }
    Some(worst)
}

/// Relative error of the adversary's parameter and input gradients on one
/// random instance, with the forward noise pinned, or `None` if the
/// instance sits on a ReLU kink.
pub fn adversary_gradient_error(kind: HeadKind, seed: u64) -> Option<f64> {
    let mut rng = RngStream::new(seed, 1);
    let d = rng.random_range(2..8);
    let h = rng.random_range(2..10);
    let n = rng.random_range(2..5);
    let mut params = AdversaryParams::init(kind, d, h, n, 4.0, &mut rng).unwrap();
    params.b1 = sample_gaussian_iid(&mut rng, h, 0.0, 0.1).unwrap();
    let em = sample_gaussian_iid(&mut rng, d, 0.0, 1.0).unwrap();
    let y = rng.random_range(0..n);
    let noise = NoiseDraw::sample(&params.head, &mut rng).unwrap();
    let loss = |p: &AdversaryParams, x: &[f64]| ce_loss(&forward_with_noise(p, x, noise.clone()).unwrap(), y).unwrap();

    let trace = forward_with_noise(&params, &em, noise.clone()).unwrap();
    if near_kink(&trace.pre_activation) {
        return None;
    }
    let (gp, gx) = backward(&params, &trace, y).unwrap();
    let fp = central_diff(|x| loss(&params.unflatten(x).unwrap(), &em), &params.flatten(), FD_STEP);
    let fx = central_diff(|x| loss(&params, x), &em, FD_STEP);
    Some(worst_rel(&gp.flatten(), &fp, FD_FLOOR).max(worst_rel(&gx, &fx, FD_FLOOR)))
}

/// Worst error over the first `points` kink-free instances, and how many
/// seeds were skipped to find them.
fn worst_over(points: usize, mut error: impl FnMut(u64) -> Option<f64>) -> (f64, usize) {
    let (mut worst, mut found, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while found < points {
        match error(seed) {
            Some(e) => {
                worst = worst.max(e);
                found += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    (worst, skipped)
}

pub fn criterion_1() -> Check {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut skipped = 0;
    for kind in [ScorerKind::Dot, ScorerKind::Mlp] {
        let (w, s) = worst_over(100, |seed| bce_gradient_error(kind, seed));
        worst.push((format!("bce/{kind:?}"), w));
        skipped += s;
    }
    for kind in [HeadKind::Plain, HeadKind::Vae, HeadKind::Dsvae] {
        let (w, s) = worst_over(100, |seed| adversary_gradient_error(kind, seed));
        worst.push((format!("{kind:?}"), w));
        skipped += s;
    }
    let passed = worst.iter().all(|(_, w)| *w < tol);
    let summary: Vec<String> = worst.iter().map(|(k, w)| format!("{k} {w:.1e}")).collect();
    Check::new(
        passed,
        format!("max rel err over 100 points each: {}; {skipped} kink seeds skipped", summary.join(", ")),
    )
    .within(start, Duration::from_secs(30))
}

pub fn criterion_2() -> Check {
    let start = Instant::now();
    let (mut agree, mut converged, mut worst_gap) = (0, 0, 0.0f64);
    let n = 50;
    for t in 0..n as u64 {
        let spec = TrialSpec {
            head: HeadKind::Plain,
            input_dim: 4,
            hidden: 4 + (t % 5) as usize,
            n_classes: 2 + (t % 4) as usize,
            lambda: 0.0,
        };
        let inst = spec.instance(2024, t).unwrap();
        let mut cfg = DlgConfig::new(DlgTarget::Plain, 9000 + t);
        cfg.steps = 1000;
        cfg.restarts = 32;
        let trial = attack_record(&inst.record, &inst.params, &cfg).unwrap();
        let out = &trial.outcome;
        let objective = MatchingObjective::new(&inst.params, None, inst.record.grads.primary()).unwrap();
        let x: Vec<f64> = out.em.iter().chain(&out.label_logits).copied().collect();
        let replay = objective.replay(&x).unwrap();
        let cf = closed_form_label_plain(&inst.record, &replay.z, &replay.y_hat).unwrap();
        if out.status == DlgStatus::Converged {
            converged += 1;
            if Some(cf.predicted) == out.predicted() {
                agree += 1;
            }
        }
        if out.final_loss < 1e-8 {
            let gap = cf
                .y_star
                .iter()
                .zip(&out.label_dist)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst_gap = worst_gap.max(gap);
        }
    }
    Check::new(
        converged == n && agree == n && worst_gap <= 1e-4,
        format!("{converged}/{n} converged, {agree}/{n} labels agree, max |y* - dummy y| {worst_gap:.2e}"),
    )
    .within(start, Duration::from_secs(120))
}

/// Per-head worst `|δ − (ŷ − y)|` with true client quantities, and the
/// worst gap between the direct and factorised DSVAE correction.
pub fn substitution_errors(instances: u64) -> ([f64; 3], f64) {
    let mut worst = [0.0f64; 3];
    let mut factor_gap = 0.0f64;
    for t in 0..instances {
        for (slot, head) in [HeadKind::Plain, HeadKind::Vae, HeadKind::Dsvae].into_iter().enumerate() {
            let spec = TrialSpec { head, input_dim: 6, hidden: 12, n_classes: 2 + (t % 4) as usize, lambda: 4.0 };
            let inst = spec.instance(77, t).unwrap();
            let rec = &inst.record;
            let grad = rec.grads.primary();
            let r = match (&rec.oracle.noise, head) {
                (Some(NoiseDraw { eps1: Some(e1), .. }), HeadKind::Dsvae) => {
                    closed_form_dsvae(grad, &inst.hidden, e1, &rec.oracle.probs).unwrap()
                }
                _ => closed_form_plain(grad, &inst.hidden, &rec.oracle.probs).unwrap(),
            };
            let err = r
                .delta
                .iter()
                .enumerate()
                .map(|(i, d)| (d - (rec.oracle.probs[i] - f64::from(u8::from(i == rec.oracle.y)))).abs())
                .fold(0.0, f64::max);
            worst[slot] = worst[slot].max(err);

            if head == HeadKind::Dsvae {
                let mut rng = RngStream::new(78, t);
                let e1 = rec.oracle.noise.as_ref().and_then(|n| n.eps1.clone()).unwrap();
                let (n, h) = e1.shape();
                let z_prime: Vec<f64> = sample_gaussian_iid(&mut rng, h, 0.0, 1.0).unwrap().iter().map(|v| v.abs()).collect();
                let e1_prime = DenseMatrix::from_vec(n, h, sample_gaussian_iid(&mut rng, n * h, 1.0, 4.0).unwrap()).unwrap();
                let y_hat_prime = vec![1.0 / n as f64; n];
                let direct = closed_form_dsvae(grad, &z_prime, &e1_prime, &y_hat_prime).unwrap();
                let factored = factorized_delta(&rec.oracle.probs, rec.oracle.y, &inst.hidden, &e1, &z_prime, &e1_prime).unwrap();
                let gap = direct.delta.iter().zip(&factored).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                factor_gap = factor_gap.max(gap);
            }
        }
    }
    (worst, factor_gap)
}

pub fn criterion_3() -> Check {
    let start = Instant::now();
    let (worst, gap) = substitution_errors(100);
    Check::new(
        worst.iter().all(|w| *w <= 1e-10) && gap <= 1e-10,
        format!(
            "max |δ - (ŷ - y)| plain {:.1e}, vae {:.1e}, dsvae {:.1e}; direct vs factorised {gap:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
    .within(start, Duration::from_secs(10))
}

pub fn criterion_4() -> Check {
    let start = Instant::now();
    let plain = TrialSpec { head: HeadKind::Plain, input_dim: 16, hidden: 32, n_classes: 3, lambda: 0.0 };
    let dsvae = TrialSpec { head: HeadKind::Dsvae, input_dim: 16, hidden: 32, n_classes: 2, lambda: 4.0 };
    let p = idlg_trials(&plain, 1000, 11).unwrap().recovery_rate;
    let d = idlg_trials(&dsvae, 1000, 12).unwrap().recovery_rate;
    Check::new(
        p == 1.0 && d <= 0.75,
        format!("plain recovery {p:.3}, dsvae(λ=4) binary recovery {d:.3}"),
    )
    .within(start, Duration::from_secs(60))
}

pub fn criterion_5() -> Check {
    let start = Instant::now();
    let rate = |head| {
        let spec = TrialSpec { head, input_dim: 32, hidden: 100, n_classes: 2, lambda: 4.0 };
        let cfg = DlgConfig::new(DlgTarget::for_head(head), 5);
        dlg_trials(&spec, 200, &cfg, 31).unwrap().0.recovery_rate
    };
    let (p, v, d) = (rate(HeadKind::Plain), rate(HeadKind::Vae), rate(HeadKind::Dsvae));
    Check::new(
        p >= v && v >= d && p - d >= 0.15,
        format!("DLG recovery plain {p:.3} >= vae {v:.3} >= dsvae {d:.3}, gap {:.3}", p - d),
    )
    .within(start, Duration::from_secs(300))
}

/// Default configuration writing into `out`.
pub fn base_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_str("", &[format!("run.out_dir={:?}", out.display().to_string())]).unwrap()
}

pub fn variant(base: &ExperimentConfig, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    base.with_overrides(&o).unwrap()
}

pub struct EndToEnd {
    pub original: MetricReport,
    pub binary: MetricReport,
    pub original_secs: f64,
    pub binary_secs: f64,
}

pub fn end_to_end(out: &Path) -> EndToEnd {
    let base = base_config(out);
    let t = Instant::now();
    let original = run_experiment(&variant(&base, &["adversary.enabled=false"])).unwrap();
    let original_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let binary = run_experiment(&base).unwrap();
    EndToEnd { original, binary, original_secs, binary_secs: t.elapsed().as_secs_f64() }
}

pub fn criterion_6(e2e: &EndToEnd) -> Check {
    let (o, b) = (&e2e.original, &e2e.binary);
    let drop = o.bacc - b.bacc;
    let rel = 1.0 - b.ndcg[1] / o.ndcg[1];
    let secs = e2e.original_secs + e2e.binary_secs;
    let in_time = secs <= 600.0;
    Check::new(
        drop >= 0.10 && rel <= 0.15 && in_time,
        format!(
            "BAcc {:.4} -> {:.4} (drop {drop:.4}), NDCG@10 {:.4} -> {:.4} (rel drop {:.1}%); {secs:.1}s (limit 600s)",
            o.bacc,
            b.bacc,
            o.ndcg[1],
            b.ndcg[1],
            100.0 * rel
        ),
    )
}

pub fn criterion_7(e2e: &EndToEnd, out: &Path) -> Check {
    let start = Instant::now();
    let always = run_experiment(&variant(&base_config(out), &["sut.mode=\"always\""])).unwrap();
    let b = &e2e.binary;
    let gap = (b.bacc - always.bacc).abs();
    Check::new(
        b.ndcg[1] >= always.ndcg[1] && gap <= 0.05,
        format!(
            "NDCG@10 binary {:.4} vs always {:.4}; BAcc binary {:.4} vs always {:.4} (gap {gap:.4})",
            b.ndcg[1], always.ndcg[1], b.bacc, always.bacc
        ),
    )
    .within(start, Duration::from_secs(900))
}

/// True when `xs` is non-increasing except for at most one rise of at
/// most `slack`.
pub fn non_increasing_with_slack(xs: &[f64], slack: f64) -> bool {
    let rises: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    rises.is_empty() || (rises.len() == 1 && rises[0] <= slack)
}

pub fn criterion_8(out: &Path) -> Check {
    let start = Instant::now();
    let rows = sweep_lambda(&base_config(out), &[0.0, 1.0, 4.0]).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.grad_attack_acc.unwrap_or(f64::NAN)).collect();
    let ndcg: Vec<f64> = rows.iter().map(|r| r.ndcg10).collect();
    let neg_ndcg: Vec<f64> = ndcg.iter().map(|v| -v).collect();
    let ok = acc.iter().all(|a| a.is_finite())
        && non_increasing_with_slack(&acc, 0.02)
        && non_increasing_with_slack(&neg_ndcg, 0.02);
    Check::new(
        ok,
        format!(
            "λ = 0, 1, 4: gradient-attack acc {:.3}, {:.3}, {:.3}; NDCG@10 {:.4}, {:.4}, {:.4}",
            acc[0], acc[1], acc[2], ndcg[0], ndcg[1], ndcg[2]
        ),
    )
    .within(start, Duration::from_secs(1200))
}

/// Rank by full sort with ties counted against the test item.
pub fn brute_rank(scores: &[f64], candidates: &[usize], test: usize) -> usize {
    let mut order: Vec<(f64, bool)> = candidates.iter().map(|&j| (scores[j], false)).collect();
    order.push((scores[test], true));
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order.iter().position(|e| e.1).unwrap() + 1
}

pub fn brute_hr(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1.0;
        }
    }
    hits / ranks.len() as f64
}

pub fn brute_ndcg(ranks: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for &r in ranks {
        if r <= k {
            total += std::f64::consts::LN_2 / ((r + 1) as f64).ln();
        }
    }
    total / ranks.len() as f64
}

pub fn brute_bacc(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..n_classes {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        let hit = members.iter().filter(|&&i| pred[i] == c).count();
        recalls.push(hit as f64 / members.len() as f64);
    }
    recalls.iter().sum::<f64>() / n_classes as f64
}

/// Micro-F1 from confusion counts: pooled TP over pooled TP + (FP + FN)/2.
pub fn brute_f1_micro(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        for i in 0..truth.len() {
            match (pred[i] == c, truth[i] == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Worst metric discrepancy over `instances` random small problems, and
/// whether the F1 = accuracy identity held on all of them.
pub fn metric_oracle_errors(instances: u64) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut identity = true;
    for t in 0..instances {
        let mut rng = RngStream::new(500, t);
        let n_users = rng.random_range(1..=10);
        let n_items = rng.random_range(3..=20);
        let dim = rng.random_range(1..4);
        // Small integer embeddings make score ties common.
        let int = |rng: &mut RngStream, n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(rng.random_range(-2i8..=2))).collect() };
        let users = DenseMatrix::from_vec(n_users, dim, int(&mut rng, n_users * dim)).unwrap();
        let items = DenseMatrix::from_vec(n_items, dim, int(&mut rng, n_items * dim)).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for _ in 0..n_users {
            let mut tr: Vec<usize> = (0..n_items).filter(|_| rng.random_bool(0.3)).collect();
            let te = rng.random_range(0..n_items);
            tr.retain(|&i| i != te);
            train.push(tr);
            test.push(Some(te));
        }
        let ranks = rank_all(&users, &train, &test, &items, &ScorerParams::Dot, Candidates::All, &RngStream::new(0, 0)).unwrap();
        let brute: Vec<usize> = (0..n_users)
            .map(|u| {
                let scores: Vec<f64> = (0..n_items)
                    .map(|i| users.row(u).iter().zip(items.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                let te = test[u].unwrap();
                let cands: Vec<usize> = (0..n_items).filter(|i| *i != te && !train[u].contains(i)).collect();
                brute_rank(&scores, &cands, te)
            })
            .collect();
        if ranks != brute {
            worst = f64::INFINITY;
        }
        for k in [1, 5, 10, 15, 20] {
            worst = worst.max((hr_at_k(&ranks, k).unwrap() - brute_hr(&brute, k)).abs());
            worst = worst.max((ndcg_at_k(&ranks, k).unwrap() - brute_ndcg(&brute, k)).abs());
        }

        let n_classes = rng.random_range(2..=4);
        let len = rng.random_range(n_classes..=30);
        let mut truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_classes)).collect();
        truth[..n_classes].copy_from_slice(&(0..n_classes).collect::<Vec<_>>());
        let pred: Vec<usize> = truth
            .iter()
            .map(|&c| if rng.random_bool(0.6) { c } else { rng.random_range(0..n_classes) })
            .collect();
        worst = worst.max((bacc(&pred, &truth, n_classes).unwrap() - brute_bacc(&pred, &truth, n_classes)).abs());
        let f1 = f1_micro(&pred, &truth).unwrap();
        worst = worst.max((f1 - brute_f1_micro(&pred, &truth, n_classes)).abs());
        identity &= (f1 - accuracy(&pred, &truth).unwrap()).abs() <= 1e-12;
    }
    (worst, identity)
}

pub fn criterion_9() -> Check {
    let start = Instant::now();
    let (worst, identity) = metric_oracle_errors(200);
    Check::new(
        worst <= 1e-12 && identity,
        format!("max |metric - brute force| {worst:.1e}; f1_micro = accuracy on all: {identity}"),
    )
    .within(start, Duration::from_secs(5))
}

pub fn criterion_10(out: &Path) -> Check {
    let start = Instant::now();
    let cfg = base_config(out);
    let paths = RunPaths::for_config(&cfg);
    run_experiment(&cfg).unwrap();
    let csv_a = std::fs::read(&paths.metrics).unwrap();
    let manifest_a = std::fs::read(&paths.manifest).unwrap();
    run_experiment(&cfg).unwrap();
    let csv_b = std::fs::read(&paths.metrics).unwrap();
    let manifest_b = std::fs::read(&paths.manifest).unwrap();

    let data = load_dataset(&cfg).unwrap().index(cfg.dataset.attribute);
    let parallel = train_on(&variant(&cfg, &["run.parallel=true"]), data.clone()).unwrap();
    let serial = train_on(&variant(&cfg, &["run.parallel=false"]), data).unwrap();
    let same_state = parallel.state == serial.state && parallel.user_embeddings == serial.user_embeddings;
    Check::new(
        csv_a == csv_b && manifest_a == manifest_b && same_state,
        format!(
            "metrics CSV identical: {}, manifest identical: {}, parallel = serial state: {same_state}",
            csv_a == csv_b,
            manifest_a == manifest_b
        ),
    )
    .within(start, Duration::from_secs(300))
}

/// Maximal k-core by enumeration: union of every edge subset whose present
/// users and items all meet the thresholds.
pub fn brute_kcore(edges: &[Interaction], min_user: usize, min_item: usize) -> BTreeSet<Interaction> {
    let mut union = BTreeSet::new();
    for mask in 0u32..(1 << edges.len()) {
        let chosen: Vec<&Interaction> = (0..edges.len()).filter(|i| mask >> i & 1 == 1).map(|i| &edges[i]).collect();
        let ok = chosen.iter().all(|e| {
            chosen.iter().filter(|o| o.user == e.user).count() >= min_user
                && chosen.iter().filter(|o| o.item == e.item).count() >= min_item
        });
        if ok {
            union.extend(chosen.into_iter().copied());
        }
    }
    union
}

/// Random bipartite graph with distinct edges.
pub fn random_graph(rng: &mut RngStream, max_edges: usize) -> Vec<Interaction> {
    let users = rng.random_range(1..5u32);
    let items = rng.random_range(1..6u32);
    let mut set = BTreeSet::new();
    for _ in 0..rng.random_range(1..=max_edges) {
        set.insert((rng.random_range(1..=users), rng.random_range(1..=items)));
    }
    set.into_iter()
        .enumerate()
        .map(|(t, (user, item))| Interaction { user, item, timestamp: t as i64 })
        .collect()
}

/// Every surviving user and item meets its threshold.
pub fn satisfies_kcore(edges: &[Interaction], min_user: usize, min_item: usize) -> bool {
    edges.iter().all(|e| {
        edges.iter().filter(|o| o.user == e.user).count() >= min_user
            && edges.iter().filter(|o| o.item == e.item).count() >= min_item
    })
}

pub const ML100K_ENV: &str = "ATTRUNLEARN_ML100K";

pub fn criterion_11() -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(900, 0);
    let mut mismatches = 0;
    for _ in 0..100 {
        let g = random_graph(&mut rng, 12);
        let (mu, mi) = (rng.random_range(1..4), rng.random_range(1..4));
        let got: BTreeSet<Interaction> = filter_kcore(&g, mu, mi).map(|v| v.into_iter().collect()).unwrap_or_default();
        if got != brute_kcore(&g, mu, mi) {
            mismatches += 1;
        }
    }

    let mut loo_ok = true;
    for t in 0..100 {
        let mut rng = RngStream::new(901, t);
        let n_users = rng.random_range(1..8u32);
        let mut ints = Vec::new();
        let mut attrs = std::collections::BTreeMap::new();
        for u in 1..=n_users {
            attrs.insert(u, UserAttribute { user: u, gender: (u % 2) as u8, age_bucket: 0 });
            for k in 0..rng.random_range(2..6) {
                ints.push(Interaction { user: u, item: rng.random_range(1..30), timestamp: rng.random_range(0..4) + k });
            }
        }
        ints.sort();
        ints.dedup_by_key(|i| (i.user, i.item));
        let ds = Dataset::from_parts(ints, attrs).unwrap();
        match leave_one_out_split(&ds) {
            Ok(split) => {
                for u in &split.users {
                    loo_ok &= split.interactions.iter().any(|i| i.user == *u) && split.test_holdout.contains_key(u);
                }
            }
            Err(_) => loo_ok &= ds.user_degrees().values().any(|&d| d < 2),
        }
    }

    let ml = match std::env::var_os(ML100K_ENV) {
        Some(path) => {
            let parsed = attrunlearn::data::parse_movielens(Path::new(&path), attrunlearn::data::MovieLensFormat::Tab).unwrap();
            let core = filter_kcore(&parsed.interactions, 5, 5).unwrap();
            let stable = filter_kcore(&core, 5, 5).unwrap() == core && satisfies_kcore_fast(&core, 5, 5);
            loo_ok &= stable;
            format!("ML-100K: {} -> {} interactions, rescan stable: {stable}", parsed.interactions.len(), core.len())
        }
        None => format!("ML-100K not present (set {ML100K_ENV} to its u.data)"),
    };
    Check::new(
        mismatches == 0 && loo_ok,
        format!("k-core vs brute force: {}/100 agree; leave-one-out keeps every user: {loo_ok}; {ml}", 100 - mismatches),
    )
    .within(start, Duration::from_secs(60))
}

fn satisfies_kcore_fast(edges: &[Interaction], min_user: usize, min_item: usize) -> bool {
    let mut ud = std::collections::HashMap::new();
    let mut id = std::collections::HashMap::new();
    for e in edges {
        *ud.entry(e.user).or_insert(0usize) += 1;
        *id.entry(e.item).or_insert(0usize) += 1;
    }
    ud.values().all(|&d| d >= min_user) && id.values().all(|&d| d >= min_item)
}
