//! Training algorithms over environment datasets: empirical risk
//! minimization, invariance-penalty training, sample-wise and universal
//! adversarial training, domain-wise adversarial training with one shared
//! perturbation per environment, its linearized surrogate, and
//! majority-vote ensembling — plus the ℓp projection and perturbation
//! bookkeeping they all share.
//!
//! Conventions that make runs reproducible and comparable:
//!
//! - Environments are visited in lexicographic `env_id` order, so the
//!   caller's slice order never matters. Batch and perturbation RNG
//!   streams are derived from `(seed, env_id)`, not slice position.
//! - ERM, AT, UAT, and DAT take one optimizer step per environment per
//!   iteration (round-robin); IRMv1 and LDAT take one step per iteration
//!   on their summed objective. With a single environment the two
//!   schedules coincide, which is what the degeneracy tests exercise.
//! - The δ ascent uses the ℓ2-normalized gradient scaled by `alpha`
//!   (raw-gradient mode behind `normalize_ascent = false`), δ is
//!   initialized coordinate-wise uniform in [−ε, ε] (zero-init behind
//!   `zero_init_delta`), and it persists across the whole run.
//! - `loss_clamp` applies only while computing the δ-ascent gradient,
//!   never to the model-update loss.
//! - Perturbed inputs are clipped to `input_range` after adding δ and
//!   before the model update; `None` disables clipping (e.g. for
//!   unbounded synthetic features).
//!
//! All optimizer and perturbation arithmetic runs in f64 regardless of the
//! model precision, so f32 models follow the same trajectory decisions.

use crate::data::{Batcher, DataError, EnvironmentDataset, Fnv1a};
use crate::nets::{self, Arch, Model, ModelSpec, NetsError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use ndarray::{Array1, Array2, ArrayD, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training environments supplied")]
    NoEnvironments,
    #[error("duplicate environment id {0:?}")]
    DuplicateEnv(String),
    #[error("no batch supplied for environment {0:?}")]
    MissingBatch(String),
    #[error(
        "non-finite loss {value} at iteration {iteration} in environment \
         {env_id:?}; aborting the run"
    )]
    NonFiniteLoss {
        iteration: usize,
        env_id: String,
        value: f64,
    },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ── ℓp projection ───────────────────────────────────────────────────────

/// Norm defining the perturbation ball.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    #[default]
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linf")]
    LInf,
}

impl NormP {
    /// Only p = 2 and p = ∞ balls are supported.
    pub fn from_f64(p: f64) -> Result<NormP, TrainError> {
        if p == 2.0 {
            Ok(NormP::L2)
        } else if p.is_infinite() && p > 0.0 {
            Ok(NormP::LInf)
        } else {
            Err(TrainError::Config(format!("unsupported perturbation norm p = {p}")))
        }
    }
}

fn project_slice(delta: &mut [f64], eps: f64, p: NormP) {
    assert!(eps > 0.0, "projection radius must be positive");
    match p {
        NormP::L2 => {
            let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            // scale only when outside, so in-ball inputs pass through bitwise
            if norm > eps {
                let s = eps / norm;
                for d in delta.iter_mut() {
                    *d *= s;
                }
            }
        }
        NormP::LInf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
    }
}

/// Project δ onto the ℓp ball of radius `eps`: scale by eps/‖δ‖₂ iff the
/// ℓ2 norm exceeds eps, or clamp coordinates to [−eps, eps]. Idempotent;
/// in-ball inputs come back unchanged.
pub fn project_lp(delta: &Array1<f64>, eps: f64, p: NormP) -> Array1<f64> {
    let mut out = delta.clone();
    project_slice(out.as_slice_mut().expect("contiguous"), eps, p);
    out
}

// ── Perturbation state ──────────────────────────────────────────────────

/// One shared perturbation: a single δ applied to every sample of its
/// environment, kept inside the ℓp ball of radius `eps` after every update.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    pub env_id: String,
    pub delta: Array1<f64>,
    pub norm_p: NormP,
    pub eps: f64,
    pub alpha: f64,
}

impl PerturbationState {
    /// ℓ2 norm of the current δ (the logged `delta_norm`).
    pub fn l2_norm(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    Irmv1,
    At,
    Uat,
    Dat,
    Ldat,
    EnsembleUat,
}

impl Algorithm {
    /// Whether the algorithm maintains perturbations (and so needs ε, α > 0).
    fn perturbs(self) -> bool {
        matches!(
            self,
            Algorithm::At | Algorithm::Uat | Algorithm::Dat | Algorithm::EnsembleUat
        )
    }

    pub const ALL: [Algorithm; 7] = [
        Algorithm::Erm,
        Algorithm::Irmv1,
        Algorithm::At,
        Algorithm::Uat,
        Algorithm::Dat,
        Algorithm::Ldat,
        Algorithm::EnsembleUat,
    ];
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algorithm::Erm => "erm",
            Algorithm::Irmv1 => "irmv1",
            Algorithm::At => "at",
            Algorithm::Uat => "uat",
            Algorithm::Dat => "dat",
            Algorithm::Ldat => "ldat",
            Algorithm::EnsembleUat => "ensemble_uat",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Algorithm::Erm),
            "irmv1" => Ok(Algorithm::Irmv1),
            "at" => Ok(Algorithm::At),
            "uat" => Ok(Algorithm::Uat),
            "dat" => Ok(Algorithm::Dat),
            "ldat" => Ok(Algorithm::Ldat),
            "ensemble_uat" | "ensemble-uat" => Ok(Algorithm::EnsembleUat),
            other => Err(TrainError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive-moment estimation with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    #[default]
    Adam,
    /// Plain gradient descent; mainly for closed-form and scaling tests.
    Sgd,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_iterations() -> usize {
    1000
}
fn default_eval_interval() -> usize {
    100
}
fn default_eps() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.05
}
fn default_pgd_steps() -> usize {
    10
}
fn default_irm_lambda() -> f64 {
    100.0
}
fn default_input_range() -> Option<(f64, f64)> {
    Some((0.0, 1.0))
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub model: ModelSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Perturbation radius (AT/UAT/DAT) or penalty weight (LDAT).
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Ascent step size.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Inner ascent steps for sample-wise AT.
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "default_irm_lambda")]
    pub irm_lambda: f64,
    /// Iterations with penalty weight 1 before `irm_lambda` kicks in.
    #[serde(default)]
    pub irm_anneal_iters: usize,
    /// Per-sample loss clamp (lo, hi) applied during δ ascent only.
    #[serde(default)]
    pub loss_clamp: Option<(f64, f64)>,
    /// Legal input range; perturbed inputs are clipped into it.
    #[serde(default = "default_input_range")]
    pub input_range: Option<(f64, f64)>,
    #[serde(default)]
    pub norm_p: NormP,
    #[serde(default)]
    pub seed: u64,
    /// Use the ℓ2-normalized ascent gradient (raw gradient when false).
    #[serde(default = "default_true")]
    pub normalize_ascent: bool,
    /// Start δ at zero instead of uniform in [−ε, ε].
    #[serde(default)]
    pub zero_init_delta: bool,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl TrainerConfig {
    /// A config with library defaults for everything but the essentials.
    pub fn new(algorithm: Algorithm, model: ModelSpec) -> Self {
        TrainerConfig {
            algorithm,
            model,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            iterations: default_iterations(),
            eval_interval: default_eval_interval(),
            eps: default_eps(),
            alpha: default_alpha(),
            pgd_steps: default_pgd_steps(),
            irm_lambda: default_irm_lambda(),
            irm_anneal_iters: 0,
            loss_clamp: None,
            input_range: default_input_range(),
            norm_p: NormP::L2,
            seed: 0,
            normalize_ascent: true,
            zero_init_delta: false,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.algorithm.perturbs() && !(self.eps > 0.0 && self.alpha > 0.0) {
            return bad(format!(
                "{} needs eps > 0 and alpha > 0 (got eps={}, alpha={})",
                self.algorithm, self.eps, self.alpha
            ));
        }
        if self.algorithm == Algorithm::Ldat && self.eps < 0.0 {
            return bad(format!("ldat needs eps >= 0 (got {})", self.eps));
        }
        if self.algorithm == Algorithm::At && self.pgd_steps == 0 {
            return bad("at needs pgd_steps >= 1".into());
        }
        if self.algorithm == Algorithm::Irmv1 && self.irm_lambda < 0.0 {
            return bad(format!("irm_lambda {} must be nonnegative", self.irm_lambda));
        }
        if let Some((lo, hi)) = self.loss_clamp {
            if !(lo < hi) {
                return bad(format!("loss_clamp ({lo}, {hi}) needs lo < hi"));
            }
        }
        if let Some((lo, hi)) = self.input_range {
            if !(lo < hi) {
                return bad(format!("input_range ({lo}, {hi}) needs lo < hi"));
            }
        }
        Ok(())
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// First-order optimizer state over the model's parameter slices, in
/// declaration order. All moments live in f64.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<E: Scalar>(kind: OptimizerKind, lr: f64, model: &Model<E>) -> Optimizer {
        let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Optimizer {
            kind,
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step<E: Scalar>(&mut self, model: &mut Model<E>, grads: &[ArrayD<E>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let slices = model.param_slices_mut();
        debug_assert_eq!(slices.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (slice, grad) in slices.into_iter().zip(grads.iter()) {
                    for (p, g) in slice.iter_mut().zip(grad.iter()) {
                        let g = Scalar::to_f64(*g);
                        *p = E::from_f64(Scalar::to_f64(*p) - self.lr * g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for ((slice, grad), (m, v)) in slices
                    .into_iter()
                    .zip(grads.iter())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (j, (p, g)) in slice.iter_mut().zip(grad.iter()).enumerate() {
                        let g = Scalar::to_f64(*g);
                        m[j] = B1 * m[j] + (1.0 - B1) * g;
                        v[j] = B2 * v[j] + (1.0 - B2) * g * g;
                        let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPS);
                        *p = E::from_f64(Scalar::to_f64(*p) - update);
                    }
                }
            }
        }
    }
}

// ── Shared step mechanics ───────────────────────────────────────────────

/// One environment's minibatch.
#[derive(Clone, Debug)]
pub struct Minibatch<E: Scalar> {
    pub env_id: String,
    pub xs: Array2<E>,
    pub ys: Vec<i8>,
}

/// What one perturbed environment step reports back.
#[derive(Clone, Debug)]
pub struct EnvStepLog<E: Scalar> {
    pub loss: f64,
    pub delta_norm: f64,
    pub x_adv: Array2<E>,
}

/// Sample-wise AT step report; `deltas` rows are the final per-sample δ_x.
#[derive(Clone, Debug)]
pub struct AtStepLog<E: Scalar> {
    pub loss: f64,
    pub deltas: Array2<f64>,
    pub x_adv: Array2<E>,
}

/// Per-environment loss and penalty of a summed-objective step.
#[derive(Clone, Debug)]
pub struct EnvObjectiveLog {
    pub env_id: String,
    pub loss: f64,
    pub penalty: f64,
}

/// Rows are per-sample gradients of the **batch-mean** (optionally clamped)
/// logistic loss with respect to the input, cast to f64.
fn input_grads_f64<E: Scalar>(
    model: &Model<E>,
    xs: &Array2<E>,
    ys: &[i8],
    clamp: Option<(f64, f64)>,
) -> Result<Array2<f64>, TrainError> {
    let tape = Tape::new();
    let x = tape.leaf(xs.clone().into_dyn(), true)?;
    let bound = model.bind(&tape, false)?;
    let mut loss = bound
        .logits(&x)?
        .reshape(&[xs.nrows()])?
        .logistic_loss(ys)?;
    if let Some((lo, hi)) = clamp {
        loss = loss.clamp(E::from_f64(lo), E::from_f64(hi));
    }
    tape.backward(&loss.mean_all())?;
    let g = x.grad().expect("input leaf requires grad");
    let g = g.into_dimensionality::<Ix2>().expect("2-d input grad");
    // force standard layout so downstream row views expose slices
    let mut out = Array2::<f64>::zeros(g.dim());
    out.zip_mut_with(&g, |o, v| *o = Scalar::to_f64(*v));
    Ok(out)
}

/// δ += α·g (g ℓ2-normalized first unless disabled; zero gradients leave
/// δ untouched).
fn ascent_update(delta: &mut [f64], grad: &[f64], alpha: f64, normalize: bool) {
    if normalize {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (d, g) in delta.iter_mut().zip(grad.iter()) {
                *d += alpha * g / norm;
            }
        }
    } else {
        for (d, g) in delta.iter_mut().zip(grad.iter()) {
            *d += alpha * g;
        }
    }
}

/// x + δ with one shared δ row, clipped into `range` when given. Adding a
/// zero-magnitude δ and clipping an in-range value are both bitwise no-ops.
fn apply_shared_delta<E: Scalar>(
    xs: &Array2<E>,
    delta: &Array1<f64>,
    range: Option<(f64, f64)>,
) -> Array2<E> {
    let mut out = xs.clone();
    for mut row in out.rows_mut() {
        for (v, d) in row.iter_mut().zip(delta.iter()) {
            let mut x = Scalar::to_f64(*v) + d;
            if let Some((lo, hi)) = range {
                x = x.clamp(lo, hi);
            }
            *v = E::from_f64(x);
        }
    }
    out
}

/// x + δ with one δ row per sample.
fn apply_rowwise_delta<E: Scalar>(
    xs: &Array2<E>,
    deltas: &Array2<f64>,
    range: Option<(f64, f64)>,
) -> Array2<E> {
    let mut out = xs.clone();
    for (mut row, drow) in out.rows_mut().into_iter().zip(deltas.rows()) {
        for (v, d) in row.iter_mut().zip(drow.iter()) {
            let mut x = Scalar::to_f64(*v) + d;
            if let Some((lo, hi)) = range {
                x = x.clamp(lo, hi);
            }
            *v = E::from_f64(x);
        }
    }
    out
}

// ── Iteration operations ────────────────────────────────────────────────

/// One optimizer step on the batch-mean logistic loss. Returns the loss
/// value before the step.
pub fn erm_step<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    xs: &Array2<E>,
    ys: &[i8],
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let x = tape.constant(xs.clone().into_dyn())?;
    let loss = bound
        .logits(&x)?
        .reshape(&[xs.nrows()])?
        .logistic_loss(ys)?
        .mean_all();
    tape.backward(&loss)?;
    let grads = bound.param_grads();
    opt.step(model, &grads);
    Ok(Scalar::to_f64(loss.scalar_value()?))
}

/// One environment visit with a shared perturbation: (a) one ascent step
/// on δ using the normalized gradient of the (optionally clamped) mean
/// loss at x+δ; (b) projection onto the ε-ball; (c) clip x+δ into the
/// input range; (d) one optimizer step on the adversarial batch.
fn perturbed_env_step<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    pert: &mut PerturbationState,
    batch: &Minibatch<E>,
    cfg: &TrainerConfig,
) -> Result<EnvStepLog<E>, TrainError> {
    let xs_pert = apply_shared_delta(&batch.xs, &pert.delta, None);
    let grads = input_grads_f64(model, &xs_pert, &batch.ys, cfg.loss_clamp)?;
    // ∇_δ of the batch-mean loss is the sum of the per-sample rows
    let mut g = Array1::<f64>::zeros(grads.ncols());
    for row in grads.rows() {
        g.zip_mut_with(&row, |a, b| *a += b);
    }
    ascent_update(
        pert.delta.as_slice_mut().expect("contiguous"),
        g.as_slice().expect("contiguous"),
        pert.alpha,
        cfg.normalize_ascent,
    );
    project_slice(pert.delta.as_slice_mut().expect("contiguous"), pert.eps, pert.norm_p);
    let x_adv = apply_shared_delta(&batch.xs, &pert.delta, cfg.input_range);
    let loss = erm_step(model, opt, &x_adv, &batch.ys)?;
    Ok(EnvStepLog {
        loss,
        delta_norm: pert.l2_norm(),
        x_adv,
    })
}

/// One domain-wise adversarial iteration: visit every environment in the
/// order of `perts`, performing the shared-perturbation step on each.
pub fn dat_iteration<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    perts: &mut [PerturbationState],
    batches: &[Minibatch<E>],
    cfg: &TrainerConfig,
) -> Result<Vec<EnvStepLog<E>>, TrainError> {
    let mut logs = Vec::with_capacity(perts.len());
    for pert in perts.iter_mut() {
        let batch = batches
            .iter()
            .find(|b| b.env_id == pert.env_id)
            .ok_or_else(|| TrainError::MissingBatch(pert.env_id.clone()))?;
        logs.push(perturbed_env_step(model, opt, pert, batch, cfg)?);
    }
    Ok(logs)
}

/// One universal adversarial iteration: mechanically identical to a
/// single-environment visit of [`dat_iteration`], with the one global δ.
pub fn uat_iteration<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    pert: &mut PerturbationState,
    batch: &Minibatch<E>,
    cfg: &TrainerConfig,
) -> Result<EnvStepLog<E>, TrainError> {
    perturbed_env_step(model, opt, pert, batch, cfg)
}

/// One sample-wise adversarial iteration: per-sample δ_x from zero,
/// `pgd_steps` rounds of normalized ℓ2 ascent with projection, then one
/// optimizer step on x+δ_x.
pub fn at_iteration<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    batch: &Minibatch<E>,
    cfg: &TrainerConfig,
) -> Result<AtStepLog<E>, TrainError> {
    let mut deltas = Array2::<f64>::zeros((batch.xs.nrows(), batch.xs.ncols()));
    for _ in 0..cfg.pgd_steps {
        let xs_pert = apply_rowwise_delta(&batch.xs, &deltas, None);
        let grads = input_grads_f64(model, &xs_pert, &batch.ys, cfg.loss_clamp)?;
        for (mut drow, grow) in deltas.rows_mut().into_iter().zip(grads.rows()) {
            let d = drow.as_slice_mut().expect("contiguous");
            ascent_update(d, grow.as_slice().expect("contiguous"), cfg.alpha, cfg.normalize_ascent);
            project_slice(d, cfg.eps, cfg.norm_p);
        }
    }
    let x_adv = apply_rowwise_delta(&batch.xs, &deltas, cfg.input_range);
    let loss = erm_step(model, opt, &x_adv, &batch.ys)?;
    Ok(AtStepLog {
        loss,
        deltas,
        x_adv,
    })
}

/// One step on Σ_e [risk_e + λ_eff · (∇_w mean ℓ(w·ŷ, y)|_{w=1})²] where
/// the squared gradient has the closed form (mean σ(−u)·(−u))², u = y·ŷ.
/// λ_eff is 1 before `irm_anneal_iters` and `irm_lambda` after; when
/// λ_eff > 1 the summed objective is rescaled by 1/λ_eff to keep step
/// sizes comparable.
pub fn irmv1_step<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    batches: &[Minibatch<E>],
    cfg: &TrainerConfig,
    iteration: usize,
) -> Result<Vec<EnvObjectiveLog>, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::NoEnvironments);
    }
    let lambda = if iteration < cfg.irm_anneal_iters {
        1.0
    } else {
        cfg.irm_lambda
    };
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let mut logs = Vec::with_capacity(batches.len());
    let mut total: Option<Tensor<E>> = None;
    for b in batches {
        let n = b.xs.nrows();
        let x = tape.constant(b.xs.clone().into_dyn())?;
        let logits = bound.logits(&x)?.reshape(&[n])?;
        let risk = logits.logistic_loss(&b.ys)?.mean_all();
        let y_arr = ArrayD::from_shape_vec(
            IxDyn(&[n]),
            b.ys.iter().map(|&y| E::from_f64(f64::from(y))).collect(),
        )
        .expect("label shape");
        let neg_u = logits.mul_const(&y_arr)?.neg();
        let penalty = neg_u.sigmoid_op().mul(&neg_u)?.mean_all().square();
        logs.push(EnvObjectiveLog {
            env_id: b.env_id.clone(),
            loss: Scalar::to_f64(risk.scalar_value()?),
            penalty: Scalar::to_f64(penalty.scalar_value()?),
        });
        let term = risk.add(&penalty.scale(E::from_f64(lambda)))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let mut objective = total.expect("at least one batch");
    if lambda > 1.0 {
        objective = objective.scale(E::from_f64(1.0 / lambda));
    }
    tape.backward(&objective)?;
    let grads = bound.param_grads();
    opt.step(model, &grads);
    Ok(logs)
}

/// One step on Σ_e [risk_e + ε·‖mean ∇ₓℓ‖₂] with the penalty differentiable
/// through the tape: per-sample input-gradient rows are rebuilt from the
/// frozen ReLU activation pattern (exact almost everywhere for a
/// piecewise-linear net), so the model parameters receive the penalty's
/// gradient. Dense architecture only.
pub fn ldat_step<E: Scalar>(
    model: &mut Model<E>,
    opt: &mut Optimizer,
    batches: &[Minibatch<E>],
    cfg: &TrainerConfig,
) -> Result<Vec<EnvObjectiveLog>, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::NoEnvironments);
    }
    if !matches!(model.spec.arch, Arch::Mlp) {
        return Err(TrainError::Config(
            "the linearized domain penalty needs the dense architecture".into(),
        ));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let mut logs = Vec::with_capacity(batches.len());
    let mut total: Option<Tensor<E>> = None;
    for b in batches {
        let n = b.xs.nrows();
        let x = tape.constant(b.xs.clone().into_dyn())?;
        let (feats, masks) = bound.features_with_masks(&x)?;
        let logits = feats.matmul(&bound.head)?.reshape(&[n])?;
        let risk = logits.logistic_loss(&b.ys)?.mean_all();

        // ∇_x ŷ rows under the frozen activation pattern:
        // v = (1·βᵀ)⊙M_L, v ← (v·W_lᵀ)⊙M_{l−1}, rows = v·W₀ᵀ
        let ones = tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), E::from_f64(1.0)))?;
        let mut v = ones.matmul(&bound.head.transpose()?)?;
        if let Some(last) = masks.last() {
            v = v.mul(&tape.constant(last.clone())?)?;
        }
        for l in (1..bound.weights.len()).rev() {
            v = v
                .matmul(&bound.weights[l].transpose()?)?
                .mul(&tape.constant(masks[l - 1].clone())?)?;
        }
        let rows = if bound.weights.is_empty() {
            v
        } else {
            v.matmul(&bound.weights[0].transpose()?)?
        };

        // per-sample loss slope σ(−y·ŷ)·(−y) turns rows into ∇_x ℓ
        let y_arr = ArrayD::from_shape_vec(
            IxDyn(&[n]),
            b.ys.iter().map(|&y| E::from_f64(f64::from(y))).collect(),
        )
        .expect("label shape");
        let neg_y = y_arr.mapv(|v| E::from_f64(-Scalar::to_f64(v)));
        let coef = logits.mul_const(&y_arr)?.neg().sigmoid_op().mul_const(&neg_y)?;
        let mean_grad = coef
            .reshape(&[1, n])?
            .matmul(&rows)?
            .scale(E::from_f64(1.0 / n as f64));
        let penalty = mean_grad.l2_norm();

        logs.push(EnvObjectiveLog {
            env_id: b.env_id.clone(),
            loss: Scalar::to_f64(risk.scalar_value()?),
            penalty: Scalar::to_f64(penalty.scalar_value()?),
        });
        let term = risk.add(&penalty.scale(E::from_f64(cfg.eps)))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let objective = total.expect("at least one batch");
    tape.backward(&objective)?;
    let grads = bound.param_grads();
    opt.step(model, &grads);
    Ok(logs)
}

// ── Ensemble voting ─────────────────────────────────────────────────────

/// Hard ±1 prediction of one model (logit ≥ 0 → +1).
fn hard_predictions<E: Scalar>(model: &Model<E>, xs: &Array2<E>) -> Result<Vec<i8>, TrainError> {
    let logits = model.logits_plain(xs)?;
    Ok(logits
        .column(0)
        .iter()
        .map(|&t| if Scalar::to_f64(t) >= 0.0 { 1 } else { -1 })
        .collect())
}

/// Majority vote over per-model hard predictions for a batch; ties go to
/// the lowest model index.
pub fn ensemble_uat_predict_batch<E: Scalar>(
    models: &[Model<E>],
    xs: &Array2<E>,
) -> Result<Vec<i8>, TrainError> {
    if models.is_empty() {
        return Err(TrainError::Config("ensemble needs at least one model".into()));
    }
    let votes: Vec<Vec<i8>> = models
        .iter()
        .map(|m| hard_predictions(m, xs))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(xs.nrows());
    for i in 0..xs.nrows() {
        let pos = votes.iter().filter(|v| v[i] == 1).count();
        let neg = votes.len() - pos;
        out.push(match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Equal => votes[0][i],
        });
    }
    Ok(out)
}

/// Single-sample majority vote; see [`ensemble_uat_predict_batch`].
pub fn ensemble_uat_predict<E: Scalar>(
    models: &[Model<E>],
    x: &ndarray::ArrayView1<E>,
) -> Result<i8, TrainError> {
    let xs = x
        .to_owned()
        .insert_axis(ndarray::Axis(0));
    Ok(ensemble_uat_predict_batch(models, &xs)?[0])
}

// ── Training history ────────────────────────────────────────────────────

/// One logged row: a training visit (split = "train") or an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub env_id: String,
    pub loss: Option<f64>,
    pub penalty: Option<f64>,
    pub delta_norm: Option<f64>,
    pub split: String,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    /// CSV with the fixed columns
    /// `iteration,env_id,loss,penalty,delta_norm,split,accuracy`;
    /// absent values serialize as empty cells, floats round-trip exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,env_id,loss,penalty,delta_norm,split,accuracy\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration,
                r.env_id,
                cell(r.loss),
                cell(r.penalty),
                cell(r.delta_norm),
                r.split,
                cell(r.accuracy),
            ));
        }
        out
    }

    /// Accuracy rows of the last evaluation round for a split, keyed by
    /// env_id.
    pub fn final_accuracies(&self, split: &str) -> Vec<(String, f64)> {
        let last = self
            .rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.accuracy.is_some())
            .map(|r| r.iteration);
        let Some(last) = last else { return Vec::new() };
        self.rows
            .iter()
            .filter(|r| r.split == split && r.iteration == last)
            .filter_map(|r| r.accuracy.map(|a| (r.env_id.clone(), a)))
            .collect()
    }
}

// ── The training loop ───────────────────────────────────────────────────

struct EnvStream<'a, E: Scalar> {
    data: &'a EnvironmentDataset<E>,
    batcher: Batcher,
}

fn stream_seed(seed: u64, tag: &str, env_id: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.update(tag.as_bytes());
    h.update(env_id.as_bytes());
    seed ^ h.finish()
}

fn make_streams<'a, E: Scalar>(
    cfg: &TrainerConfig,
    envs: &'a [EnvironmentDataset<E>],
) -> Result<Vec<EnvStream<'a, E>>, TrainError> {
    if envs.is_empty() {
        return Err(TrainError::NoEnvironments);
    }
    let mut sorted: Vec<&EnvironmentDataset<E>> = envs.iter().collect();
    sorted.sort_by(|a, b| a.env_id.cmp(&b.env_id));
    for pair in sorted.windows(2) {
        if pair[0].env_id == pair[1].env_id {
            return Err(TrainError::DuplicateEnv(pair[0].env_id.clone()));
        }
    }
    sorted
        .into_iter()
        .map(|data| {
            if data.n() == 0 {
                return Err(TrainError::Config(format!(
                    "environment {:?} is empty",
                    data.env_id
                )));
            }
            if data.xs.ncols() != cfg.model.input_dim {
                return Err(TrainError::Config(format!(
                    "environment {:?} has {} input columns, model expects {}",
                    data.env_id,
                    data.xs.ncols(),
                    cfg.model.input_dim
                )));
            }
            let batcher = Batcher::new(
                data.n(),
                cfg.batch_size.min(data.n()),
                stream_seed(cfg.seed, "batch", &data.env_id),
            )?;
            Ok(EnvStream { data, batcher })
        })
        .collect()
}

fn joined_ids<E: Scalar>(batches: &[Minibatch<E>]) -> String {
    batches
        .iter()
        .map(|b| b.env_id.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn draw_batch<E: Scalar>(stream: &mut EnvStream<'_, E>) -> Minibatch<E> {
    let idx = stream.batcher.next_batch();
    let (xs, ys) = stream.data.gather(&idx);
    Minibatch {
        env_id: stream.data.env_id.clone(),
        xs,
        ys,
    }
}

fn init_pert(cfg: &TrainerConfig, env_id: &str, dim: usize) -> PerturbationState {
    let mut state = PerturbationState {
        env_id: env_id.to_string(),
        delta: Array1::zeros(dim),
        norm_p: cfg.norm_p,
        eps: cfg.eps,
        alpha: cfg.alpha,
    };
    if !cfg.zero_init_delta {
        let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(cfg.seed, "delta", env_id));
        for d in state.delta.iter_mut() {
            *d = rng.gen_range(-cfg.eps..=cfg.eps);
        }
        project_slice(
            state.delta.as_slice_mut().expect("contiguous"),
            cfg.eps,
            cfg.norm_p,
        );
    }
    state
}

/// The tape refuses to build non-finite values, so a diverging run
/// surfaces as a tensor error mid-step; rewrap it with the iteration and
/// environment so the abort is actionable.
fn diagnose_step(e: TrainError, iteration: usize, env_id: &str) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. })
        | TrainError::Nets(NetsError::Tensor(TensorError::NonFinite { .. })) => {
            TrainError::NonFiniteLoss {
                iteration,
                env_id: env_id.to_string(),
                value: f64::NAN,
            }
        }
        other => other,
    }
}

fn stable_softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean logistic loss and accuracy of the model on a dataset, computed in
/// bounded-size chunks.
pub fn evaluate<E: Scalar>(
    model: &Model<E>,
    ds: &EnvironmentDataset<E>,
) -> Result<(f64, f64), TrainError> {
    let n = ds.n();
    if n == 0 {
        return Err(TrainError::Config(format!(
            "evaluation split {:?} is empty",
            ds.env_id
        )));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 1024).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (xs, ys) = ds.gather(&idx);
        let logits = model.logits_plain(&xs)?;
        for (i, &y) in ys.iter().enumerate() {
            let t = Scalar::to_f64(logits[[i, 0]]);
            let pred: i8 = if t >= 0.0 { 1 } else { -1 };
            correct += usize::from(pred == y);
            loss_sum += stable_softplus(-f64::from(y) * t);
        }
        start = end;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Run `cfg.iterations` iterations of the configured algorithm over the
/// training environments, evaluating every `eval_interval` iterations on
/// each split in `eval_splits`. Deterministic given the seed. A non-finite
/// loss aborts with a diagnostic error identifying the iteration and
/// environment.
///
/// `EnsembleUat` trains a single member exactly like `Uat`; ensembling is
/// composition over seeds via [`ensemble_uat_predict_batch`].
pub fn train<E: Scalar>(
    cfg: &TrainerConfig,
    train_envs: &[EnvironmentDataset<E>],
    eval_splits: &[EnvironmentDataset<E>],
) -> Result<(Model<E>, TrainHistory), TrainError> {
    train_with(cfg, train_envs, eval_splits, |_, _, _| Ok(()))
}

/// [`train`] with an observer invoked after each evaluation round with
/// `(eval_round_index, iteration, model)` — the hook model selection uses
/// to snapshot per-round checkpoints.
pub fn train_with<E: Scalar>(
    cfg: &TrainerConfig,
    train_envs: &[EnvironmentDataset<E>],
    eval_splits: &[EnvironmentDataset<E>],
    mut on_eval: impl FnMut(usize, usize, &Model<E>) -> Result<(), TrainError>,
) -> Result<(Model<E>, TrainHistory), TrainError> {
    cfg.validate()?;
    let mut streams = make_streams(cfg, train_envs)?;
    for ev in eval_splits {
        if ev.xs.ncols() != cfg.model.input_dim {
            return Err(TrainError::Config(format!(
                "evaluation split {:?} has {} input columns, model expects {}",
                ev.env_id,
                ev.xs.ncols(),
                cfg.model.input_dim
            )));
        }
    }
    let mut model = nets::init::<E>(&cfg.model)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let dim = cfg.model.input_dim;
    let mut perts: Vec<PerturbationState> = match cfg.algorithm {
        Algorithm::Dat => streams
            .iter()
            .map(|s| init_pert(cfg, &s.data.env_id, dim))
            .collect(),
        Algorithm::Uat | Algorithm::EnsembleUat => {
            vec![init_pert(cfg, &streams[0].data.env_id, dim)]
        }
        _ => Vec::new(),
    };
    let mut history = TrainHistory::default();
    let mut eval_round = 0usize;

    for iter in 0..cfg.iterations {
        let first_new = history.rows.len();
        match cfg.algorithm {
            Algorithm::Erm => {
                for s in streams.iter_mut() {
                    let b = draw_batch(s);
                    let loss = erm_step(&mut model, &mut opt, &b.xs, &b.ys)
                        .map_err(|e| diagnose_step(e, iter, &b.env_id))?;
                    history.rows.push(HistoryRow {
                        iteration: iter,
                        env_id: b.env_id,
                        loss: Some(loss),
                        penalty: None,
                        delta_norm: None,
                        split: "train".into(),
                        accuracy: None,
                    });
                }
            }
            Algorithm::At => {
                for s in streams.iter_mut() {
                    let b = draw_batch(s);
                    let log = at_iteration(&mut model, &mut opt, &b, cfg)
                        .map_err(|e| diagnose_step(e, iter, &b.env_id))?;
                    let mean_norm = log
                        .deltas
                        .rows()
                        .into_iter()
                        .map(|r| r.dot(&r).sqrt())
                        .sum::<f64>()
                        / log.deltas.nrows() as f64;
                    history.rows.push(HistoryRow {
                        iteration: iter,
                        env_id: b.env_id,
                        loss: Some(log.loss),
                        penalty: None,
                        delta_norm: Some(mean_norm),
                        split: "train".into(),
                        accuracy: None,
                    });
                }
            }
            Algorithm::Uat | Algorithm::EnsembleUat => {
                for s in streams.iter_mut() {
                    let b = draw_batch(s);
                    let log = uat_iteration(&mut model, &mut opt, &mut perts[0], &b, cfg)
                        .map_err(|e| diagnose_step(e, iter, &b.env_id))?;
                    history.rows.push(HistoryRow {
                        iteration: iter,
                        env_id: b.env_id,
                        loss: Some(log.loss),
                        penalty: None,
                        delta_norm: Some(log.delta_norm),
                        split: "train".into(),
                        accuracy: None,
                    });
                }
            }
            Algorithm::Dat => {
                let batches: Vec<Minibatch<E>> = streams.iter_mut().map(draw_batch).collect();
                let joined = joined_ids(&batches);
                let logs = dat_iteration(&mut model, &mut opt, &mut perts, &batches, cfg)
                    .map_err(|e| diagnose_step(e, iter, &joined))?;
                for (pert, log) in perts.iter().zip(logs.iter()) {
                    history.rows.push(HistoryRow {
                        iteration: iter,
                        env_id: pert.env_id.clone(),
                        loss: Some(log.loss),
                        penalty: None,
                        delta_norm: Some(log.delta_norm),
                        split: "train".into(),
                        accuracy: None,
                    });
                }
            }
            Algorithm::Irmv1 | Algorithm::Ldat => {
                let batches: Vec<Minibatch<E>> = streams.iter_mut().map(draw_batch).collect();
                let joined = joined_ids(&batches);
                let logs = if cfg.algorithm == Algorithm::Irmv1 {
                    irmv1_step(&mut model, &mut opt, &batches, cfg, iter)
                } else {
                    ldat_step(&mut model, &mut opt, &batches, cfg)
                }
                .map_err(|e| diagnose_step(e, iter, &joined))?;
                for log in logs {
                    history.rows.push(HistoryRow {
                        iteration: iter,
                        env_id: log.env_id,
                        loss: Some(log.loss),
                        penalty: Some(log.penalty),
                        delta_norm: None,
                        split: "train".into(),
                        accuracy: None,
                    });
                }
            }
        }
        for row in &history.rows[first_new..] {
            for value in [row.loss, row.penalty] {
                if let Some(v) = value {
                    if !v.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            iteration: iter,
                            env_id: row.env_id.clone(),
                            value: v,
                        });
                    }
                }
            }
        }
        if (iter + 1) % cfg.eval_interval == 0 {
            for ev in eval_splits {
                let (loss, acc) = evaluate(&model, ev)?;
                history.rows.push(HistoryRow {
                    iteration: iter,
                    env_id: ev.env_id.clone(),
                    loss: Some(loss),
                    penalty: None,
                    delta_norm: None,
                    split: ev.split.clone(),
                    accuracy: Some(acc),
                });
            }
            on_eval(eval_round, iter, &model)?;
            eval_round += 1;
        }
    }
    Ok((model, history))
}
