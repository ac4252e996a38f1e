//! Optimization loop for SFT, TFT and DFT runs.
//!
//! Everything that affects the numbers is derived from the config seed: the
//! per-epoch shuffle, the batch composition and the summation order. Two runs
//! with the same inputs therefore produce identical parameters and metrics,
//! and a run resumed from a saved optimizer state matches an uninterrupted one.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::checkpoint::{get_tensor, get_u32, get_u64, put_tensor, put_u32, put_u64};
use crate::model::ModelParams;
use crate::supervision::{loss_gradients, LossBreakdown, ParallelExample, SupervisionSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// English pairs only.
    Sft,
    /// Target-language pairs, final-layer loss only.
    Tft,
    /// Target-language pairs plus intermediate supervision.
    Dft,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sft => "sft",
            Method::Tft => "tft",
            Method::Dft => "dft",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Decays linearly to zero at the last step.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Global gradient-norm limit.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            schedule: Schedule::Constant,
            clip_norm: None,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::adam(lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub supervision: SupervisionSpec,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many steps have run.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Save every this many steps (CLI runs only).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Adds wall-clock time to every metrics record, which makes metrics files
    /// differ between otherwise identical runs.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(method: Method, optimizer: OptimizerConfig, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            method,
            supervision: SupervisionSpec::none(),
            optimizer,
            batch_size,
            epochs,
            max_steps: None,
            seed,
            checkpoint_every: None,
            record_wall_time: false,
        }
    }

    /// Full schema check, including that DFT names an active stage.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.method == Method::Dft && self.supervision.is_none() {
            return Err(Error::Config("dft needs at least one active supervision stage".into()));
        }
        self.validate_hyper(n_layers)
    }

    /// Checks the trainer relies on. An all-none DFT spec passes and trains
    /// exactly like TFT.
    pub fn validate_hyper(&self, n_layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if let Some(c) = o.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c}")));
            }
        }
        match self.method {
            Method::Dft => self.supervision.validate(n_layers),
            Method::Sft | Method::Tft => Ok(()),
        }
    }

    /// Supervision actually applied; SFT and TFT use the final-layer term only.
    pub fn effective_supervision(&self) -> SupervisionSpec {
        match self.method {
            Method::Dft => self.supervision.clone(),
            Method::Sft | Method::Tft => SupervisionSpec::none(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_tft: f64,
    pub l_lc: f64,
    pub l_et: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient actually applied.
    pub applied_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
}

impl TrainMetrics {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { t: 0, m: z.clone(), v: z }
    }
}

fn check_grads(grads: &[Tensor]) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient".into()))
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, hyper: &AdamHyper, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Config(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    check_grads(grads)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `limit`; returns the new norm.
pub fn clip_global_norm(grads: &mut [Tensor], limit: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= limit {
        return norm;
    }
    let s = limit / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
    global_norm(grads)
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Completed steps.
    pub step: usize,
    /// Empty for SGD.
    pub adam: Option<AdamState>,
}

pub const OPTIMIZER_STATE_VERSION: u32 = 1;
const OPT_MAGIC: &[u8; 8] = b"DFTOPTIM";

pub fn write_optimizer_state(w: &mut impl Write, state: &OptimizerState) -> Result<()> {
    w.write_all(OPT_MAGIC)?;
    put_u32(w, OPTIMIZER_STATE_VERSION)?;
    put_u64(w, state.step as u64)?;
    match &state.adam {
        None => put_u32(w, 0)?,
        Some(a) => {
            put_u32(w, a.m.len() as u32)?;
            put_u64(w, a.t)?;
            for (k, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                put_tensor(w, &format!("m.{k}"), m)?;
                put_tensor(w, &format!("v.{k}"), v)?;
            }
        }
    }
    Ok(())
}

pub fn read_optimizer_state(r: &mut impl Read) -> Result<OptimizerState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated file".into()))?;
    if &magic != OPT_MAGIC {
        return Err(Error::Format("bad optimizer-state magic".into()));
    }
    let version = get_u32(r)?;
    if version != OPTIMIZER_STATE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: OPTIMIZER_STATE_VERSION,
        });
    }
    let step = get_u64(r)? as usize;
    let n = get_u32(r)? as usize;
    if n == 0 {
        return Ok(OptimizerState { step, adam: None });
    }
    let t = get_u64(r)?;
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        m.push(get_tensor(r)?.1);
        v.push(get_tensor(r)?.1);
    }
    Ok(OptimizerState {
        step,
        adam: Some(AdamState { t, m, v }),
    })
}

pub fn save_optimizer_state(path: &Path, state: &OptimizerState) -> Result<()> {
    let mut buf = Vec::new();
    write_optimizer_state(&mut buf, state)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_optimizer_state(path: &Path) -> Result<OptimizerState> {
    let bytes = std::fs::read(path)?;
    read_optimizer_state(&mut bytes.as_slice())
}

/// Training loop state: parameters, optimizer moments and metrics so far.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub metrics: TrainMetrics,
    data: Vec<ParallelExample>,
    spec: SupervisionSpec,
    order: Vec<usize>,
    order_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &[ParallelExample], params: ModelParams) -> Result<Self> {
        let n_params = params.named_tensors().len();
        let adam = (config.optimizer.kind == OptimizerKind::Adam).then(|| {
            let refs: Vec<&Tensor> = params.named_tensors().into_iter().map(|(_, _, t)| t).collect();
            AdamState::zeros_like(&refs)
        });
        debug_assert!(adam.as_ref().is_none_or(|a| a.m.len() == n_params));
        Self::resume(config, data, params, OptimizerState { step: 0, adam })
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(config: TrainConfig, data: &[ParallelExample], params: ModelParams, optimizer: OptimizerState) -> Result<Self> {
        config.validate_hyper(params.config.n_layers)?;
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for ex in data {
            ex.validate()?;
        }
        let expected_adam = config.optimizer.kind == OptimizerKind::Adam;
        if optimizer.adam.is_some() != expected_adam {
            return Err(Error::Config("optimizer state does not match optimizer kind".into()));
        }
        let data: Vec<ParallelExample> = match config.method {
            Method::Sft => data.iter().map(ParallelExample::english_only).collect(),
            Method::Tft | Method::Dft => data.to_vec(),
        };
        let spec = config.effective_supervision();
        Ok(Trainer {
            config,
            params,
            optimizer,
            metrics: TrainMetrics::default(),
            data,
            spec,
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.steps_per_epoch() * self.config.epochs;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.optimizer.step >= self.total_steps()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let o = &self.config.optimizer;
        match o.schedule {
            Schedule::Constant => o.lr,
            Schedule::Linear => o.lr * (1.0 - step as f64 / self.total_steps() as f64),
        }
    }

    fn batch_indices(&mut self, step: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.order_epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut rng);
            self.order_epoch = Some(epoch);
        }
        let bs = self.config.batch_size;
        let start = (step % spe) * bs;
        let end = (start + bs).min(self.data.len());
        (epoch, self.order[start..end].to_vec())
    }

    /// Loss and gradient for the next batch without updating anything.
    pub fn peek_gradients(&mut self) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let (_, idx) = self.batch_indices(self.optimizer.step);
        let batch: Vec<&ParallelExample> = idx.iter().map(|&i| &self.data[i]).collect();
        loss_gradients(&self.params, &batch, &self.spec)
    }

    /// Runs one optimization step. Parameters are left untouched when the
    /// step diverges.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let started = Instant::now();
        let step = self.optimizer.step;
        let (epoch, idx) = self.batch_indices(step);
        let batch: Vec<&ParallelExample> = idx.iter().map(|&i| &self.data[i]).collect();
        let (loss, mut grads) = loss_gradients(&self.params, &batch, &self.spec)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, what: "loss" });
        }
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, what: "gradient" });
        }
        let applied_norm = match self.config.optimizer.clip_norm {
            Some(limit) => clip_global_norm(&mut grads, limit),
            None => grad_norm,
        };
        let lr = self.lr_at(step);
        let o = &self.config.optimizer;
        let mut tensors = self.params.tensors_mut();
        match &mut self.optimizer.adam {
            Some(state) => {
                let hyper = AdamHyper {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                };
                adam_step(&mut tensors, &grads, state, &hyper, lr)?
            }
            None => sgd_step(&mut tensors, &grads, lr)?,
        }
        self.optimizer.step += 1;
        self.metrics.records.push(StepRecord {
            step,
            epoch,
            lr,
            l_tft: loss.l_tft,
            l_lc: loss.l_lc,
            l_et: loss.l_et,
            total: loss.total,
            grad_norm,
            applied_norm,
            wall_ms: self
                .config
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        });
        Ok(self.metrics.records.last().unwrap())
    }

    /// Steps until the configured budget is spent or `stop` returns true
    /// after a step.
    pub fn run_until(&mut self, mut stop: impl FnMut(&Trainer) -> Result<bool>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            if stop(self)? {
                break;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(|_| Ok(false))
    }
}

/// Runs a complete training job.
pub fn train(config: &TrainConfig, data: &[ParallelExample], params: ModelParams) -> Result<(ModelParams, TrainMetrics)> {
    let mut t = Trainer::new(config.clone(), data, params)?;
    t.run()?;
    Ok((t.params, t.metrics))
}
