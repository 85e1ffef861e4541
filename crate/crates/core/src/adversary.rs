//! Adversarial attribute head behind a gradient reversal layer.
//!
//! The head is `ReLU(W₁·em + b₁)` followed by one of three final layers:
//!
//! * `Plain`: `s = W·z`
//! * `Vae`: `s_i = (W^μ_i + W^σ_i ⊙ ε₂_i)ᵀ z`
//! * `Dsvae`: `s_i = (W^μ_i ⊙ ε₁_i + W^σ_i ⊙ ε₂_i)ᵀ z`
//!
//! with `ε₁ ~ N(1, λ)` and `ε₂ ~ N(0, 1)` drawn per weight entry on every
//! forward call and stored in the [`ForwardTrace`] so that the backward pass
//! reuses exactly the same draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    argmax, axpy, hadamard, norm, sample_gaussian_iid, softmax, DenseMatrix, RngStream,
};
use crate::recmodel::xavier_init;

pub const DEFAULT_HIDDEN: usize = 100;
pub const DEFAULT_GRL_SCALE: f64 = 400.0;
pub const DEFAULT_STOCHASTICITY: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Plain,
    Vae,
    #[default]
    Dsvae,
}

/// Final layer of the adversary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Plain {
        w: DenseMatrix,
    },
    Vae {
        w_mu: DenseMatrix,
        w_sigma: DenseMatrix,
    },
    Dsvae {
        w_mu: DenseMatrix,
        w_sigma: DenseMatrix,
        /// Variance of `ε₁`.
        lambda: f64,
    },
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Plain { .. } => HeadKind::Plain,
            Head::Vae { .. } => HeadKind::Vae,
            Head::Dsvae { .. } => HeadKind::Dsvae,
        }
    }

    /// `W` for the plain head, `W^μ` otherwise.
    pub fn primary(&self) -> &DenseMatrix {
        match self {
            Head::Plain { w } => w,
            Head::Vae { w_mu, .. } | Head::Dsvae { w_mu, .. } => w_mu,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.primary().rows()
    }

    fn matrices(&self) -> Vec<&DenseMatrix> {
        match self {
            Head::Plain { w } => vec![w],
            Head::Vae { w_mu, w_sigma } | Head::Dsvae { w_mu, w_sigma, .. } => {
                vec![w_mu, w_sigma]
            }
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Head::Plain { w } => vec![w],
            Head::Vae { w_mu, w_sigma } | Head::Dsvae { w_mu, w_sigma, .. } => {
                vec![w_mu, w_sigma]
            }
        }
    }
}

/// Adversary parameters `ω`. The same type holds gradients; the DSVAE `λ`
/// is carried along but never differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryParams {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub head: Head,
}

impl AdversaryParams {
    pub fn init(
        kind: HeadKind,
        input_dim: usize,
        hidden: usize,
        n_classes: usize,
        lambda: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("stochasticity λ = {lambda} must be >= 0")));
        }
        if n_classes < 2 {
            return Err(Error::Domain("adversary needs at least 2 classes".into()));
        }
        let w1 = xavier_init(hidden, input_dim, rng)?;
        let head = match kind {
            HeadKind::Plain => Head::Plain {
                w: xavier_init(n_classes, hidden, rng)?,
            },
            HeadKind::Vae => Head::Vae {
                w_mu: xavier_init(n_classes, hidden, rng)?,
                w_sigma: xavier_init(n_classes, hidden, rng)?,
            },
            HeadKind::Dsvae => Head::Dsvae {
                w_mu: xavier_init(n_classes, hidden, rng)?,
                w_sigma: xavier_init(n_classes, hidden, rng)?,
                lambda,
            },
        };
        Ok(AdversaryParams {
            w1,
            b1: vec![0.0; hidden],
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        AdversaryParams {
            w1: z(&self.w1),
            b1: vec![0.0; self.b1.len()],
            head: match &self.head {
                Head::Plain { w } => Head::Plain { w: z(w) },
                Head::Vae { w_mu, w_sigma } => Head::Vae {
                    w_mu: z(w_mu),
                    w_sigma: z(w_sigma),
                },
                Head::Dsvae {
                    w_mu,
                    w_sigma,
                    lambda,
                } => Head::Dsvae {
                    w_mu: z(w_mu),
                    w_sigma: z(w_sigma),
                    lambda: *lambda,
                },
            },
        }
    }

    /// `w1`, `b1`, then the head matrices in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w1.as_slice().to_vec();
        v.extend_from_slice(&self.b1);
        for m in self.head.matrices() {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let expected = self.flatten().len();
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "adversary expects {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut rest = flat;
        let mut take = |m: &mut [f64]| {
            let (head, tail) = rest.split_at(m.len());
            m.copy_from_slice(head);
            rest = tail;
        };
        take(out.w1.as_mut_slice());
        take(&mut out.b1);
        for m in out.head.matrices_mut() {
            take(m.as_mut_slice());
        }
        Ok(out)
    }

    /// `self += alpha · other` over all trainable parameters.
    pub fn add_scaled(&mut self, alpha: f64, other: &AdversaryParams) -> Result<()> {
        if self.head.kind() != other.head.kind() || self.b1.len() != other.b1.len() {
            return Err(Error::Dimension("adversary shapes differ".into()));
        }
        self.w1.add_scaled(alpha, &other.w1)?;
        axpy(alpha, &other.b1, &mut self.b1);
        for (a, b) in self
            .head
            .matrices_mut()
            .into_iter()
            .zip(other.head.matrices())
        {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Noise of one forward pass, shaped like the head weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    /// μ-path multiplier `ε₁ ~ N(1, λ)`; DSVAE only.
    pub eps1: Option<DenseMatrix>,
    /// σ-path multiplier `ε₂ ~ N(0, 1)`; VAE and DSVAE.
    pub eps2: Option<DenseMatrix>,
}

impl NoiseDraw {
    /// Draws noise for `head`; the plain head draws nothing and leaves `rng`
    /// untouched. `ε₂` is drawn first, so a DSVAE head with `λ = 0` sees the
    /// same `ε₂` as a VAE head on the same stream.
    pub fn sample(head: &Head, rng: &mut RngStream) -> Result<Option<NoiseDraw>> {
        let (n, h) = head.primary().shape();
        let draw = |rng: &mut RngStream, mean: f64, var: f64| {
            DenseMatrix::from_vec(n, h, sample_gaussian_iid(rng, n * h, mean, var)?)
        };
        Ok(match head {
            Head::Plain { .. } => None,
            Head::Vae { .. } => Some(NoiseDraw {
                eps1: None,
                eps2: Some(draw(rng, 0.0, 1.0)?),
            }),
            Head::Dsvae { lambda, .. } => {
                let eps2 = draw(rng, 0.0, 1.0)?;
                let eps1 = draw(rng, 1.0, *lambda)?;
                Some(NoiseDraw {
                    eps1: Some(eps1),
                    eps2: Some(eps2),
                })
            }
        })
    }
}

/// Effective final-layer weights `W_eff` such that `s = W_eff · z`.
pub fn effective_weights(head: &Head, noise: Option<&NoiseDraw>) -> Result<DenseMatrix> {
    let missing = || Error::State("stochastic head evaluated without a noise draw".into());
    match head {
        Head::Plain { w } => Ok(w.clone()),
        Head::Vae { w_mu, w_sigma } => {
            let eps2 = noise.and_then(|n| n.eps2.as_ref()).ok_or_else(missing)?;
            let mut w = w_mu.clone();
            w.add_scaled(1.0, &w_sigma.hadamard(eps2)?)?;
            Ok(w)
        }
        Head::Dsvae { w_mu, w_sigma, .. } => {
            let noise = noise.ok_or_else(missing)?;
            let eps1 = noise.eps1.as_ref().ok_or_else(missing)?;
            let eps2 = noise.eps2.as_ref().ok_or_else(missing)?;
            let mut w = w_mu.hadamard(eps1)?;
            w.add_scaled(1.0, &w_sigma.hadamard(eps2)?)?;
            Ok(w)
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `W₁·em + b₁` before the ReLU.
    pub pre_activation: Vec<f64>,
    /// Post-ReLU activation `h`, which is also the head input `z`.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub noise: Option<NoiseDraw>,
}

impl ForwardTrace {
    pub fn head_input(&self) -> &[f64] {
        &self.hidden
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Forward pass with fresh noise.
pub fn forward(params: &AdversaryParams, em_u: &[f64], rng: &mut RngStream) -> Result<ForwardTrace> {
    let noise = NoiseDraw::sample(&params.head, rng)?;
    forward_with_noise(params, em_u, noise)
}

/// Forward pass with a given (pinned) noise draw.
pub fn forward_with_noise(
    params: &AdversaryParams,
    em_u: &[f64],
    noise: Option<NoiseDraw>,
) -> Result<ForwardTrace> {
    if em_u.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "adversary expects input dim {}, got {}",
            params.input_dim(),
            em_u.len()
        )));
    }
    if params.head.primary().cols() != params.hidden() {
        return Err(Error::Dimension("head width does not match hidden layer".into()));
    }
    let mut pre = params.w1.matvec(em_u)?;
    axpy(1.0, &params.b1, &mut pre);
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let w_eff = effective_weights(&params.head, noise.as_ref())?;
    let logits = w_eff.matvec(&hidden)?;
    let probs = softmax(&logits)?;
    Ok(ForwardTrace {
        input: em_u.to_vec(),
        pre_activation: pre,
        hidden,
        logits,
        probs,
        noise,
    })
}

/// Cross-entropy `−ln ŷ_y`, computed from the logits for stability.
pub fn ce_loss(trace: &ForwardTrace, y: usize) -> Result<f64> {
    if y >= trace.logits.len() {
        return Err(Error::Domain(format!(
            "label {y} out of range for {} classes",
            trace.logits.len()
        )));
    }
    let max = trace.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + trace.logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - trace.logits[y])
}

/// `∂CE/∂s = ŷ − onehot(y)`.
pub fn logit_residual(probs: &[f64], y: usize) -> Vec<f64> {
    let mut r = probs.to_vec();
    r[y] -= 1.0;
    r
}

/// Final-layer gradients, the part of `∇ω` an honest-but-curious server
/// attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FinalLayerGrad {
    Plain { w: DenseMatrix },
    Vae { w_mu: DenseMatrix, w_sigma: DenseMatrix },
    Dsvae { w_mu: DenseMatrix, w_sigma: DenseMatrix },
}

impl FinalLayerGrad {
    pub fn from_grads(grads: &AdversaryParams) -> Self {
        match &grads.head {
            Head::Plain { w } => FinalLayerGrad::Plain { w: w.clone() },
            Head::Vae { w_mu, w_sigma } => FinalLayerGrad::Vae {
                w_mu: w_mu.clone(),
                w_sigma: w_sigma.clone(),
            },
            Head::Dsvae { w_mu, w_sigma, .. } => FinalLayerGrad::Dsvae {
                w_mu: w_mu.clone(),
                w_sigma: w_sigma.clone(),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            FinalLayerGrad::Plain { .. } => HeadKind::Plain,
            FinalLayerGrad::Vae { .. } => HeadKind::Vae,
            FinalLayerGrad::Dsvae { .. } => HeadKind::Dsvae,
        }
    }

    /// `∇W` for the plain head, `∇W^μ` otherwise.
    pub fn primary(&self) -> &DenseMatrix {
        match self {
            FinalLayerGrad::Plain { w } => w,
            FinalLayerGrad::Vae { w_mu, .. } | FinalLayerGrad::Dsvae { w_mu, .. } => w_mu,
        }
    }

    pub fn sigma(&self) -> Option<&DenseMatrix> {
        match self {
            FinalLayerGrad::Plain { .. } => None,
            FinalLayerGrad::Vae { w_sigma, .. } | FinalLayerGrad::Dsvae { w_sigma, .. } => {
                Some(w_sigma)
            }
        }
    }
}

/// Gradients of `CE(h_ω(em), y)` with respect to all adversary parameters
/// and to the input embedding, reusing the noise stored in `trace`.
pub fn backward(
    params: &AdversaryParams,
    trace: &ForwardTrace,
    y: usize,
) -> Result<(AdversaryParams, Vec<f64>)> {
    let n = params.n_classes();
    if trace.probs.len() != n
        || trace.hidden.len() != params.hidden()
        || trace.input.len() != params.input_dim()
    {
        return Err(Error::State("trace was not produced by these parameters".into()));
    }
    if y >= n {
        return Err(Error::Domain(format!("label {y} out of range for {n} classes")));
    }
    let noise_kind_ok = match (&params.head, &trace.noise) {
        (Head::Plain { .. }, None) => true,
        (Head::Vae { .. }, Some(nd)) => nd.eps1.is_none() && nd.eps2.is_some(),
        (Head::Dsvae { .. }, Some(nd)) => nd.eps1.is_some() && nd.eps2.is_some(),
        _ => false,
    };
    if !noise_kind_ok {
        return Err(Error::State("trace noise does not match head variant".into()));
    }

    let r = logit_residual(&trace.probs, y);
    let z = &trace.hidden;
    let mut grads = params.zeros_like();
    match (&mut grads.head, &trace.noise) {
        (Head::Plain { w }, _) => w.add_outer(1.0, &r, z),
        (Head::Vae { w_mu, w_sigma }, Some(nd)) => {
            let eps2 = nd.eps2.as_ref().expect("checked");
            w_mu.add_outer(1.0, &r, z);
            for i in 0..n {
                axpy(r[i], &hadamard(z, eps2.row(i)), w_sigma.row_mut(i));
            }
        }
        (Head::Dsvae { w_mu, w_sigma, .. }, Some(nd)) => {
            let eps1 = nd.eps1.as_ref().expect("checked");
            let eps2 = nd.eps2.as_ref().expect("checked");
            for i in 0..n {
                axpy(r[i], &hadamard(z, eps1.row(i)), w_mu.row_mut(i));
                axpy(r[i], &hadamard(z, eps2.row(i)), w_sigma.row_mut(i));
            }
        }
        _ => unreachable!("noise kind checked above"),
    }

    let w_eff = effective_weights(&params.head, trace.noise.as_ref())?;
    let dz = w_eff.matvec_t(&r)?;
    let da: Vec<f64> = dz
        .iter()
        .zip(&trace.pre_activation)
        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
        .collect();
    grads.w1.add_outer(1.0, &da, &trace.input);
    grads.b1.copy_from_slice(&da);
    let grad_input = params.w1.matvec_t(&da)?;
    Ok((grads, grad_input))
}

/// Gradient reversal: identity forward, `−eps_u · g` backward.
pub fn grl_backward(upstream: &[f64], eps_u: f64) -> Vec<f64> {
    upstream.iter().map(|g| -eps_u * g).collect()
}

/// How the per-user perturbation budget `ε_u` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SutMode {
    /// `ε` when the adversary currently predicts the user's label, else 0.
    #[default]
    Binary,
    /// `τ / ‖∇_em CE‖₂`.
    Continuous,
    /// `ε` for every user (no trigger).
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SutConfig {
    pub mode: SutMode,
    pub eps: f64,
    pub tau: f64,
}

impl Default for SutConfig {
    fn default() -> Self {
        SutConfig {
            mode: SutMode::Binary,
            eps: DEFAULT_GRL_SCALE,
            tau: 1.0,
        }
    }
}

impl SutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(Error::Domain(format!("GRL scale {} must be >= 0", self.eps)));
        }
        if self.mode == SutMode::Continuous && !(self.tau > 0.0) {
            return Err(Error::Domain(format!("τ = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Per-user perturbation budget `ε_u`.
///
/// `input_grad_norm` is the norm of the (pre-reversal) CE gradient with
/// respect to the embedding; only the continuous mode reads it.
pub fn sut_budget(
    cfg: &SutConfig,
    trace: &ForwardTrace,
    y: usize,
    input_grad_norm: Option<f64>,
) -> Result<f64> {
    match cfg.mode {
        SutMode::Binary => Ok(if trace.predicted() == y { cfg.eps } else { 0.0 }),
        SutMode::Always => Ok(cfg.eps),
        SutMode::Continuous => match input_grad_norm {
            Some(norm) if norm > 0.0 && norm.is_finite() => Ok(cfg.tau / norm),
            other => Err(Error::DegenerateGradient(format!(
                "continuous budget needs a positive gradient norm, got {other:?}"
            ))),
        },
    }
}

/// Result of one adversarial pass for a single user.
#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub trace: ForwardTrace,
    pub loss: f64,
    /// Plain CE gradients for the adversary's own parameters.
    pub param_grads: AdversaryParams,
    /// `∇_em CE` before reversal.
    pub input_grad: Vec<f64>,
    pub eps_u: f64,
    /// Contribution to the embedding's gradient: `λ_adv · GRL(∇_em CE; ε_u)`.
    pub embedding_grad: Vec<f64>,
    /// True when `ε_u = 0`, i.e. no reversed gradient reaches the embedding.
    pub skipped: bool,
}

/// Forward, budget and backward for one user.
///
/// The adversary's parameters always receive their CE gradient; the
/// embedding receives the reversed gradient scaled by `λ_adv · ε_u`. With
/// `force_skip` the budget is zeroed (adversary pretraining).
pub fn adversarial_step(
    em_u: &[f64],
    y: usize,
    params: &AdversaryParams,
    sut: &SutConfig,
    lambda_adv: f64,
    force_skip: bool,
    rng: &mut RngStream,
) -> Result<AdversarialOutcome> {
    let trace = forward(params, em_u, rng)?;
    let loss = ce_loss(&trace, y)?;
    let (param_grads, input_grad) = backward(params, &trace, y)?;
    let eps_u = if force_skip {
        0.0
    } else {
        sut_budget(sut, &trace, y, Some(norm(&input_grad)))?
    };
    let mut embedding_grad = grl_backward(&input_grad, eps_u);
    embedding_grad.iter_mut().for_each(|g| *g *= lambda_adv);
    Ok(AdversarialOutcome {
        trace,
        loss,
        param_grads,
        input_grad,
        eps_u,
        embedding_grad,
        skipped: eps_u == 0.0,
    })
}
