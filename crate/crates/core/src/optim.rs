//! The EFCP training loop and its baselines.
//!
//! One step of a compressed preconditioned optimizer is
//!
//! ```text
//! a = ξ + g;  c = compress(a);  ξ = a − c;  A.update(c);  u = A.precondition(c);
//! θ ← (1 − γη) θ − η u
//! ```
//!
//! The uncompressed variants use the identity compressor, so `c = g` and
//! `ξ` stays zero.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::{Compressed, Compressor, Densify, ErrorFeedback, Identity, Precision, TopK};
use crate::error::{check_dim, EfcpError, Result};
use crate::ggt::Ggt;
use crate::linalg::norm;
use crate::lowrank::{LowRankConfig, LowRankMfac};
use crate::memory::{dense_window_bytes, MemoryReport, WindowAccounting};
use crate::mfac::Mfac;
use crate::tasks::{
    make_synthetic, split_layers, Dataset, LogisticTask, MlpTask, QuadraticTask, Task, TaskKind,
};
use crate::window::{DenseGradWindow, GradientWindow, SparseGradWindow};

/// A full-matrix preconditioner fed with compressed gradients.
pub trait Preconditioner: Send {
    fn update(&mut self, c: &Compressed) -> Result<()>;
    fn precondition(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<W: GradientWindow> Preconditioner for Mfac<W> {
    fn update(&mut self, c: &Compressed) -> Result<()> {
        Mfac::update(self, c)
    }

    fn precondition(&self, x: &[f64]) -> Result<Vec<f64>> {
        Mfac::precondition(self, x)
    }
}

impl<W: GradientWindow> Preconditioner for Ggt<W> {
    fn update(&mut self, c: &Compressed) -> Result<()> {
        Ggt::update(self, c)
    }

    fn precondition(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ggt::precondition(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Dmfac,
    Smfac,
    Lrmfac,
    Dggt,
    Sggt,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Dmfac,
        OptimizerKind::Smfac,
        OptimizerKind::Lrmfac,
        OptimizerKind::Dggt,
        OptimizerKind::Sggt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Dmfac => "dmfac",
            OptimizerKind::Smfac => "smfac",
            OptimizerKind::Lrmfac => "lrmfac",
            OptimizerKind::Dggt => "dggt",
            OptimizerKind::Sggt => "sggt",
        }
    }

    fn uses_lambda(self) -> bool {
        matches!(
            self,
            OptimizerKind::Dmfac | OptimizerKind::Smfac | OptimizerKind::Lrmfac
        )
    }

    fn is_ggt(self) -> bool {
        matches!(self, OptimizerKind::Dggt | OptimizerKind::Sggt)
    }

    fn is_sparse(self) -> bool {
        matches!(self, OptimizerKind::Smfac | OptimizerKind::Sggt)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown optimizer `{s}`"))
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// `η_t = η · (1 − t/T)`.
    Linear,
}

impl Schedule {
    pub fn lr(self, base: f64, t: usize, steps: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Linear => base * (1.0 - t as f64 / steps.max(1) as f64),
        }
    }
}

/// Task selector; serialized as `quadratic`, `logistic`, `mlp` or `csv:<path>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TaskSpec {
    Synthetic(TaskKind),
    Csv(String),
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::Synthetic(TaskKind::Quadratic) => f.write_str("quadratic"),
            TaskSpec::Synthetic(TaskKind::Logistic) => f.write_str("logistic"),
            TaskSpec::Synthetic(TaskKind::Mlp) => f.write_str("mlp"),
            TaskSpec::Csv(path) => write!(f, "csv:{path}"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" => Ok(TaskSpec::Synthetic(TaskKind::Quadratic)),
            "logistic" => Ok(TaskSpec::Synthetic(TaskKind::Logistic)),
            "mlp" => Ok(TaskSpec::Synthetic(TaskKind::Mlp)),
            _ => match s.strip_prefix("csv:") {
                Some(path) if !path.is_empty() => Ok(TaskSpec::Csv(path.to_string())),
                _ => Err(format!(
                    "unknown task `{s}` (expected quadratic, logistic, mlp or csv:<path>)"
                )),
            },
        }
    }
}

impl From<TaskSpec> for String {
    fn from(t: TaskSpec) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TaskSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Everything that determines a run. Serializes to the `config.json` echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Parameter dimension (quadratic) or feature count (logistic, mlp).
    pub dim: usize,
    pub samples: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    /// Gradient noise standard deviation for the quadratic task.
    pub noise: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub eps: f64,
    pub m: usize,
    pub density: f64,
    pub rank: usize,
    pub block_size: usize,
    pub precision: Precision,
    pub error_feedback: bool,
    /// Norm bound for the preconditioned update, off when `None`.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::Synthetic(TaskKind::Quadratic),
            dim: 50,
            samples: 2000,
            batch_size: 0,
            noise: 0.0,
            optimizer: OptimizerKind::Smfac,
            steps: 200,
            lr: 1e-3,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            momentum: 0.9,
            lambda: 1e-4,
            eps: 1e-5,
            m: 32,
            density: 0.01,
            rank: 4,
            block_size: 4096,
            precision: Precision::F32,
            error_feedback: true,
            clip: None,
            seed: 0,
        }
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> EfcpError {
    EfcpError::Parameter {
        name,
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Checks the parameters the chosen optimizer uses. Error names match
    /// the CLI flag names.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive, got {v}")))
            }
        };
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        positive("lr", self.lr)?;
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(invalid(
                "wd",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        if self.weight_decay * self.lr >= 1.0 {
            return Err(invalid(
                "wd",
                "weight decay times learning rate must be below 1",
            ));
        }
        if !matches!(self.task, TaskSpec::Csv(_)) {
            if self.dim == 0 {
                return Err(invalid("dim", "must be at least 1"));
            }
            if self.samples == 0 {
                return Err(invalid("samples", "must be at least 1"));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(invalid(
                "noise",
                format!("must be non-negative, got {}", self.noise),
            ));
        }
        if let Some(c) = self.clip {
            positive("clip", c)?;
        }
        match self.optimizer {
            OptimizerKind::Sgd => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(invalid(
                        "momentum",
                        format!("must be in [0, 1), got {}", self.momentum),
                    ));
                }
            }
            OptimizerKind::Adam => {}
            kind => {
                if self.m == 0 {
                    return Err(invalid("m", "window size must be at least 1"));
                }
                if kind.uses_lambda() {
                    positive("lambda", self.lambda)?;
                } else {
                    positive("eps", self.eps)?;
                }
                if kind.is_sparse() {
                    if !(self.density > 0.0 && self.density <= 1.0) {
                        return Err(invalid(
                            "density",
                            format!("must be in (0, 1], got {}", self.density),
                        ));
                    }
                    if self.block_size == 0 {
                        return Err(invalid("block", "must be at least 1"));
                    }
                }
                if kind == OptimizerKind::Lrmfac && self.rank == 0 {
                    return Err(invalid("rank", "must be at least 1"));
                }
            }
        }
        Ok(())
    }

    /// Builds the task this config describes.
    pub fn build_task(&self) -> Result<Box<dyn Task>> {
        match &self.task {
            TaskSpec::Csv(path) => {
                let data = Dataset::from_csv(path)?;
                let batch = if self.batch_size == 0 {
                    data.len()
                } else {
                    self.batch_size
                };
                if data.classes == 2 {
                    Ok(Box::new(LogisticTask::new(data, batch, self.seed)?))
                } else {
                    Ok(Box::new(MlpTask::new(
                        data,
                        crate::tasks::SYNTHETIC_MLP_HIDDEN,
                        batch,
                        self.seed,
                    )?))
                }
            }
            TaskSpec::Synthetic(TaskKind::Quadratic) => Ok(Box::new(QuadraticTask::synthetic(
                self.dim, self.noise, self.seed,
            )?)),
            TaskSpec::Synthetic(kind) if self.batch_size == 0 => {
                make_synthetic(*kind, self.dim, self.samples, self.seed)
            }
            TaskSpec::Synthetic(TaskKind::Logistic) => Ok(Box::new(LogisticTask::new(
                Dataset::two_clusters(self.dim, self.samples, self.seed)?,
                self.batch_size,
                self.seed,
            )?)),
            TaskSpec::Synthetic(TaskKind::Mlp) => Ok(Box::new(MlpTask::new(
                Dataset::blobs(
                    self.dim,
                    self.samples,
                    crate::tasks::SYNTHETIC_MLP_CLASSES,
                    self.seed,
                )?,
                crate::tasks::SYNTHETIC_MLP_HIDDEN,
                self.batch_size,
                self.seed,
            )?)),
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub upd_norm: f64,
    pub ef_norm: f64,
    pub ms: f64,
}

/// SGD with momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; dim],
            momentum,
        }
    }
}

/// Applies decoupled weight decay then an SGD-with-momentum step; returns
/// the update direction's norm.
pub fn sgd_momentum_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut SgdState,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    check_dim("sgd step", theta.len(), g.len())?;
    let shrink = 1.0 - weight_decay * lr;
    for ((th, v), gi) in theta.iter_mut().zip(state.velocity.iter_mut()).zip(g) {
        *v = state.momentum * *v + gi;
        *th = shrink * *th - lr * *v;
    }
    Ok(norm(&state.velocity))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            t: 0,
        }
    }
}

/// Adam with bias correction after decoupled weight decay; returns the
/// update direction's norm.
pub fn adam_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    check_dim("adam step", theta.len(), g.len())?;
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let shrink = 1.0 - weight_decay * lr;
    let mut sq = 0.0;
    for i in 0..theta.len() {
        state.first[i] = ADAM_BETA1 * state.first[i] + (1.0 - ADAM_BETA1) * g[i];
        state.second[i] = ADAM_BETA2 * state.second[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let dir = (state.first[i] / c1) / ((state.second[i] / c2).sqrt() + ADAM_EPS);
        sq += dir * dir;
        theta[i] = shrink * theta[i] - lr * dir;
    }
    Ok(sq.sqrt())
}

/// Error feedback + compressor + preconditioner.
pub struct EfcpOptimizer {
    feedback: ErrorFeedback,
    compressor: Box<dyn Compressor + Send>,
    preconditioner: Box<dyn Preconditioner>,
    weight_decay: f64,
    clip: Option<f64>,
}

/// What one optimizer step produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub upd_norm: f64,
    pub ef_norm: f64,
}

impl EfcpOptimizer {
    pub fn new(
        feedback: ErrorFeedback,
        compressor: Box<dyn Compressor + Send>,
        preconditioner: Box<dyn Preconditioner>,
        weight_decay: f64,
        clip: Option<f64>,
    ) -> Self {
        Self {
            feedback,
            compressor,
            preconditioner,
            weight_decay,
            clip,
        }
    }

    pub fn error_feedback(&self) -> &ErrorFeedback {
        &self.feedback
    }

    /// One EFCP step on `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) -> Result<StepStats> {
        check_dim("efcp step", theta.len(), g.len())?;
        let compressor = &self.compressor;
        let c = self.feedback.step(g, |a| compressor.compress(a))?;
        self.preconditioner.update(&c)?;
        let mut u = self.preconditioner.precondition(&c.densify())?;
        let upd_norm = apply_update(theta, &mut u, lr, self.weight_decay, self.clip)?;
        Ok(StepStats {
            upd_norm,
            ef_norm: self.feedback.error_norm(),
        })
    }
}

fn apply_update(
    theta: &mut [f64],
    u: &mut [f64],
    lr: f64,
    weight_decay: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut n = norm(u);
    if !n.is_finite() {
        return Err(EfcpError::NonFinite("preconditioned update"));
    }
    if let Some(bound) = clip {
        if n > bound {
            let s = bound / n;
            u.iter_mut().for_each(|v| *v *= s);
            n = bound;
        }
    }
    let shrink = 1.0 - weight_decay * lr;
    for (th, ui) in theta.iter_mut().zip(u.iter()) {
        *th = shrink * *th - lr * ui;
    }
    Ok(n)
}

/// Low-rank M-FAC wrapped as a flat-parameter optimizer.
pub struct LowRankOptimizer {
    inner: LowRankMfac,
    shapes: Vec<Vec<usize>>,
    weight_decay: f64,
    clip: Option<f64>,
}

impl LowRankOptimizer {
    pub fn new(
        shapes: Vec<Vec<usize>>,
        config: &LowRankConfig,
        weight_decay: f64,
        clip: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            inner: LowRankMfac::new(&shapes, config)?,
            shapes,
            weight_decay,
            clip,
        })
    }

    pub fn inner(&self) -> &LowRankMfac {
        &self.inner
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) -> Result<StepStats> {
        check_dim("lrmfac step", theta.len(), g.len())?;
        let grads: Vec<Vec<f64>> = split_layers(g, &self.shapes)
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        let mut u: Vec<f64> = self.inner.step(&grads)?.concat();
        let upd_norm = apply_update(theta, &mut u, lr, self.weight_decay, self.clip)?;
        Ok(StepStats {
            upd_norm,
            ef_norm: self.inner.error_norm(),
        })
    }
}

/// Any of the supported optimizers behind one interface.
pub enum Optimizer {
    Sgd { state: SgdState, weight_decay: f64 },
    Adam { state: AdamState, weight_decay: f64 },
    Efcp(EfcpOptimizer),
    LowRank(LowRankOptimizer),
}

impl Optimizer {
    /// Instantiates the optimizer described by `config` for a model with the
    /// given per-layer shapes.
    pub fn from_config(config: &RunConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        let d: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let feedback = || {
            if config.error_feedback {
                ErrorFeedback::new(d)
            } else {
                ErrorFeedback::disabled(d)
            }
        };
        let topk = || TopK::new(d, config.density, config.block_size, config.precision);
        let sparse_window = || {
            SparseGradWindow::new(
                config.m,
                d,
                config.block_size,
                config.density,
                config.precision,
            )
        };
        let efcp = |compressor: Box<dyn Compressor + Send>,
                    feedback: ErrorFeedback,
                    pre: Box<dyn Preconditioner>| {
            Optimizer::Efcp(EfcpOptimizer::new(
                feedback,
                compressor,
                pre,
                config.weight_decay,
                config.clip,
            ))
        };
        Ok(match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                state: SgdState::new(d, config.momentum),
                weight_decay: config.weight_decay,
            },
            OptimizerKind::Adam => Optimizer::Adam {
                state: AdamState::new(d),
                weight_decay: config.weight_decay,
            },
            OptimizerKind::Dmfac => efcp(
                Box::new(Identity),
                ErrorFeedback::new(d),
                Box::new(Mfac::new(
                    DenseGradWindow::new(config.m, d)?,
                    config.lambda,
                )?),
            ),
            OptimizerKind::Smfac => efcp(
                Box::new(topk()?),
                feedback(),
                Box::new(Mfac::new(sparse_window()?, config.lambda)?),
            ),
            OptimizerKind::Dggt => efcp(
                Box::new(Identity),
                ErrorFeedback::new(d),
                Box::new(Ggt::new(DenseGradWindow::new(config.m, d)?, config.eps)?),
            ),
            OptimizerKind::Sggt => efcp(
                Box::new(topk()?),
                feedback(),
                Box::new(Ggt::new(sparse_window()?, config.eps)?),
            ),
            OptimizerKind::Lrmfac => Optimizer::LowRank(LowRankOptimizer::new(
                shapes.to_vec(),
                &LowRankConfig {
                    window_size: config.m,
                    rank: config.rank,
                    damping: config.lambda,
                    error_feedback: config.error_feedback,
                    seed: config.seed,
                },
                config.weight_decay,
                config.clip,
            )?),
        })
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) -> Result<StepStats> {
        match self {
            Optimizer::Sgd {
                state,
                weight_decay,
            } => Ok(StepStats {
                upd_norm: sgd_momentum_step(theta, g, state, lr, *weight_decay)?,
                ef_norm: 0.0,
            }),
            Optimizer::Adam {
                state,
                weight_decay,
            } => Ok(StepStats {
                upd_norm: adam_step(theta, g, state, lr, *weight_decay)?,
                ef_norm: 0.0,
            }),
            Optimizer::Efcp(o) => o.step(theta, g, lr),
            Optimizer::LowRank(o) => o.step(theta, g, lr),
        }
    }
}

/// Static byte accounting for a run, written as `memory.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMemory {
    pub optimizer: OptimizerKind,
    pub m: u64,
    pub d: u64,
    /// Stored entries per window row (sparse) or values per row (low-rank).
    pub row_entries: Option<u64>,
    pub value_bytes: u64,
    /// Bytes held by the optimizer's gradient history and its buffers.
    pub window_bytes: u64,
    /// `4·m·d`, the uncompressed window.
    pub dense_baseline_bytes: u64,
    pub ratio: Option<f64>,
    pub per_param_ratio: Option<f64>,
}

/// Byte accounting for `config` on a `d`-parameter model.
pub fn memory_report(config: &RunConfig, shapes: &[Vec<usize>]) -> Result<RunMemory> {
    let d: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let (m, d64) = (config.m as u64, d as u64);
    let dense = dense_window_bytes(m, d64);
    let vb = config.precision.value_bytes() as u64;
    let kind = config.optimizer;
    let base = RunMemory {
        optimizer: kind,
        m,
        d: d64,
        row_entries: None,
        value_bytes: 4,
        window_bytes: 0,
        dense_baseline_bytes: dense,
        ratio: None,
        per_param_ratio: None,
    };
    Ok(match kind {
        OptimizerKind::Sgd | OptimizerKind::Adam => RunMemory {
            dense_baseline_bytes: 0,
            m: 0,
            ..base
        },
        OptimizerKind::Dmfac | OptimizerKind::Dggt => RunMemory {
            window_bytes: dense,
            ratio: Some(1.0),
            per_param_ratio: Some(1.0),
            ..base
        },
        OptimizerKind::Smfac | OptimizerKind::Sggt => {
            let layout = crate::compress::BlockLayout::new(d, config.block_size, config.density)?;
            let accounting = if kind.is_ggt() {
                WindowAccounting::Ggt
            } else {
                WindowAccounting::Mfac
            };
            let r = MemoryReport::new(accounting, m, d64, layout.row_len() as u64, vb);
            RunMemory {
                row_entries: Some(r.k),
                value_bytes: vb,
                window_bytes: r.sparse_bytes,
                ratio: Some(r.ratio),
                per_param_ratio: Some(r.headline_ratio()),
                ..base
            }
        }
        OptimizerKind::Lrmfac => {
            let per_row: u64 = shapes
                .iter()
                .map(|s| {
                    let (p1, p2) = crate::compress::unfold_dims(s)?;
                    Ok(((p1 + p2) * config.rank.min(p1).min(p2)) as u64)
                })
                .sum::<Result<u64>>()?;
            // factors + error feedback + sp result + output buffer
            let bytes = 8 * m * per_row + 4 * d64 + 4 * m + 4 * d64;
            RunMemory {
                row_entries: Some(per_row),
                value_bytes: 8,
                window_bytes: bytes,
                ratio: Some(dense as f64 / bytes as f64),
                ..base
            }
        }
    })
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub records: Vec<StepRecord>,
    pub final_theta: Vec<f64>,
    /// Full-dataset loss at the final parameters.
    pub final_loss: f64,
    pub memory: RunMemory,
}

/// Run-time switches that do not affect the optimization trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record per-step wall time in `StepRecord::ms`; zero otherwise.
    pub wall_time: bool,
}

/// Runs `config` end to end on the task it describes.
pub fn run(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let task = config.build_task()?;
    run_task(config, task.as_ref(), RunOptions::default(), |_| Ok(()))
}

/// Runs `config` on `task`, passing each record to `on_record` as soon as
/// the step completes. On divergence the records emitted so far have
/// already been delivered.
pub fn run_task<F>(
    config: &RunConfig,
    task: &dyn Task,
    options: RunOptions,
    mut on_record: F,
) -> Result<RunArtifacts>
where
    F: FnMut(&StepRecord) -> Result<()>,
{
    config.validate()?;
    let shapes = task.layer_shapes();
    let memory = memory_report(config, &shapes)?;
    let mut optimizer = Optimizer::from_config(config, &shapes)?;
    let mut theta = task.initial_params();
    let mut records = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let start = Instant::now();
        let diverged = |detail: String| EfcpError::Diverged { step: t, detail };
        let loss = task
            .loss(&theta, t)
            .map_err(|e| diverged(format!("loss evaluation failed: {e}")))?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        let g = task.grad(&theta, t)?;
        let grad_norm = norm(&g);
        let lr = config.schedule.lr(config.lr, t, config.steps);
        let stats = optimizer.step(&mut theta, &g, lr).map_err(|e| match e {
            EfcpError::NonFinite(_) | EfcpError::Breakdown(_) => {
                diverged(format!("{e} (loss {loss:e}, grad norm {grad_norm:e})"))
            }
            other => other,
        })?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(diverged("parameters became non-finite".into()));
        }
        let record = StepRecord {
            t,
            loss,
            grad_norm,
            upd_norm: stats.upd_norm,
            ef_norm: stats.ef_norm,
            ms: if options.wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        on_record(&record)?;
        records.push(record);
    }
    let final_loss = task.full_loss(&theta)?;
    Ok(RunArtifacts {
        records,
        final_theta: theta,
        final_loss,
        memory,
    })
}
