//! Deterministic training loop for the class-balancing objective.
//!
//! Every stochastic choice comes from one ChaCha stream seeded by
//! `TrainConfig::seed`. Per batch, and per sample within the batch in order,
//! the draws are:
//!
//! 1. dataset index (uniform over samples)
//! 2. noise `eps` (`data_dim` standard normals)
//! 3. timestep `t` (uniform over `1..=T`)
//! 4. condition-dropout coin (uniform in `[0, 1)`, dropped when `< phi`)
//! 5. `set_size` regularizer labels `y'`
//! 6. guidance strength `omega` (one uniform, only when trainable guidance is on)
//!
//! Steps 5 and 6 are drawn regardless of the objective so that runs which
//! differ only in `tau` or objective consume identical streams.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LongTailDataset;
use crate::denoiser::{init_denoiser, DenoiserConfig, DenoiserParams, Graph, GradientBuffer, Label};
use crate::error::{config_err, Error, Result};
use crate::loss::{build_cbdm, build_ddpm, build_tcfg, CbdmBatch, CbdmWeights, LabelSampler, LabelSetMode, TcfgConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Denoising loss only; regularizer draws are still consumed.
    Ddpm,
    Cbdm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub objective: Objective,
    pub tau: f64,
    pub gamma: f64,
    pub set_size: usize,
    pub label_set_mode: LabelSetMode,
    pub cond_dropout_phi: f64,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub init_seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub tcfg: Option<TcfgConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            lr: 2e-4,
            warmup_steps: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            objective: Objective::Cbdm,
            tau: 1.0 / 200.0,
            gamma: 0.25,
            set_size: 1,
            label_set_mode: LabelSetMode::Train,
            cond_dropout_phi: 0.1,
            ema_decay: None,
            seed: 0,
            init_seed: 0,
            checkpoint_every: 0,
            tcfg: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> CbdmWeights {
        CbdmWeights { tau: self.tau, gamma: self.gamma, set_size: self.set_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(config_err("steps and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_phi) {
            return Err(config_err(format!("cond_dropout_phi must lie in [0, 1], got {}", self.cond_dropout_phi)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(config_err("adam_eps must be positive"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(config_err("ema_decay must lie in [0, 1)"));
            }
        }
        if let Some(t) = &self.tcfg {
            t.validate()?;
        }
        self.weights().validate()
    }

    /// Learning rate at 1-indexed `step` under linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One optimizer step's diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_dm: f64,
    pub loss_r: f64,
    pub loss_rc: f64,
    pub loss_g: Option<f64>,
    pub loss_gc: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn has_guidance_columns(&self) -> bool {
        self.records.first().is_some_and(|r| r.loss_g.is_some())
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        let tcfg = self.has_guidance_columns();
        let extra = if tcfg { ",loss_g,loss_gc" } else { "" };
        writeln!(w, "step,loss_total,loss_dm,loss_r,loss_rc{extra},grad_norm,lr,wall_ms")?;
        for r in &self.records {
            let extra = if tcfg {
                format!(",{},{}", r.loss_g.unwrap_or(f64::NAN), r.loss_gc.unwrap_or(f64::NAN))
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{},{}{},{},{},{:.3}",
                r.step, r.loss_total, r.loss_dm, r.loss_r, r.loss_rc, extra, r.grad_norm, r.lr, r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1, beta2, eps }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * theta`.
pub fn ema_update(ema: &mut [f64], theta: &[f64], decay: f64) {
    for (e, t) in ema.iter_mut().zip(theta) {
        *e = decay * *e + (1.0 - decay) * t;
    }
}

/// Random choices for one batch, in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws {
    pub indices: Vec<usize>,
    pub eps: Mat,
    pub ts: Vec<usize>,
    pub dropped: Vec<bool>,
    pub label_sets: Vec<Vec<usize>>,
    pub omegas: Vec<f64>,
}

/// Consumes one batch worth of draws from `rng`.
pub fn draw_batch(
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
    dataset_len: usize,
    data_dim: usize,
    num_timesteps: usize,
    sampler: &LabelSampler,
) -> BatchDraws {
    let n = config.batch_size;
    let mut out = BatchDraws {
        indices: Vec::with_capacity(n),
        eps: Mat::zeros(n, data_dim),
        ts: Vec::with_capacity(n),
        dropped: Vec::with_capacity(n),
        label_sets: Vec::with_capacity(n),
        omegas: Vec::new(),
    };
    for i in 0..n {
        out.indices.push(rng.random_range(0..dataset_len));
        for v in out.eps.row_mut(i) {
            *v = rng.sample(StandardNormal);
        }
        out.ts.push(rng.random_range(1..=num_timesteps));
        let coin: f64 = rng.random();
        out.dropped.push(coin < config.cond_dropout_phi);
        out.label_sets.push((0..config.set_size).map(|_| sampler.draw(rng)).collect());
        if let Some(tc) = &config.tcfg {
            let u: f64 = rng.random();
            out.omegas.push(tc.omega_min + u * (tc.omega_max - tc.omega_min));
        }
    }
    out
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DenoiserParams,
    pub ema: Option<DenoiserParams>,
    pub log: TrainLog,
}

/// Runs the training loop from a fresh initialization.
pub fn train(
    config: &TrainConfig,
    dataset: &LongTailDataset,
    schedule: &DiffusionSchedule,
    denoiser_config: &DenoiserConfig,
) -> Result<TrainOutput> {
    let init = init_denoiser(denoiser_config, config.init_seed)?;
    train_from(config, dataset, schedule, init, None)
}

/// Runs the training loop with trainable guidance; the denoiser must carry an
/// omega embedding and `config.tcfg` must be set.
pub fn train_tcfg(
    config: &TrainConfig,
    dataset: &LongTailDataset,
    schedule: &DiffusionSchedule,
    denoiser_config: &DenoiserConfig,
) -> Result<TrainOutput> {
    if config.tcfg.is_none() || !denoiser_config.tcfg_enabled {
        return Err(config_err("trainable guidance needs a tcfg range and an omega embedding"));
    }
    train(config, dataset, schedule, denoiser_config)
}

/// Runs the training loop starting from `init` (fine-tuning when `init` was
/// trained before). With `checkpoint_dir`, periodic checkpoints are written
/// there, and the last good parameters are saved before a non-finite abort.
pub fn train_from(
    config: &TrainConfig,
    dataset: &LongTailDataset,
    schedule: &DiffusionSchedule,
    init: DenoiserParams,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    let dc = init.config().clone();
    if dataset.is_empty() {
        return Err(config_err("training dataset is empty"));
    }
    if dataset.data_dim() != dc.data_dim || dataset.num_classes() != dc.num_classes {
        return Err(config_err("dataset shape does not match the denoiser config"));
    }
    if dc.num_timesteps != schedule.num_steps() {
        return Err(config_err("denoiser timestep count differs from the schedule"));
    }
    if config.tcfg.is_some() && !dc.tcfg_enabled {
        return Err(config_err("tcfg training requested but the denoiser has no omega embedding"));
    }

    let sampler = LabelSampler::new(config.label_set_mode, &dataset.class_counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let mut ema = config.ema_decay.map(|_| params.clone());
    let mut adam = Adam::new(params.parameter_count(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut grads = params.zero_grads();
    let mut log = TrainLog::default();
    let n = config.batch_size;
    let d = dc.data_dim;

    for step in 1..=config.steps {
        let started = Instant::now();
        let draws = draw_batch(&mut rng, config, dataset.len(), d, schedule.num_steps(), &sampler);

        let mut x_t = Mat::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let idx = draws.indices[i];
            let noisy = schedule.forward_noise(dataset.xs.row(idx), draws.ts[i], draws.eps.row(i))?;
            x_t.row_mut(i).copy_from_slice(&noisy);
            labels.push(if draws.dropped[i] { Label::Null } else { Label::Class(dataset.labels[idx]) });
        }

        let mut graph = Graph::new(&params);
        let (total, dm, r, rc, cond) = match config.objective {
            Objective::Cbdm => {
                let terms = build_cbdm(
                    &mut graph,
                    CbdmBatch {
                        x_t: &x_t,
                        labels: &labels,
                        ts: &draws.ts,
                        eps: &draws.eps,
                        label_sets: &draws.label_sets,
                        weights: config.weights(),
                    },
                )?;
                (terms.total, terms.dm, Some(terms.r), Some(terms.rc), terms.cond)
            }
            Objective::Ddpm => {
                let (dm, cond) = build_ddpm(&mut graph, &x_t, &labels, &draws.ts, &draws.eps)?;
                (dm, dm, None, None, cond)
            }
        };
        let (total, guidance) = match &config.tcfg {
            Some(tc) => {
                let terms = build_tcfg(&mut graph, &x_t, &labels, &draws.ts, &draws.eps, &draws.omegas, tc, Some(cond))?;
                (graph.add(total, terms.total)?, Some((terms.g, terms.gc)))
            }
            None => (total, None),
        };

        grads.fill_zero();
        let loss_total = match graph.backward_into(total, 1.0, &mut grads) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                let diag = format!(
                    "step {step}: loss_total={}, loss_dm={}",
                    graph.scalar(total),
                    graph.scalar(dm)
                );
                if let Some(dir) = checkpoint_dir {
                    params.save(dir.join("checkpoint_abort.bin"))?;
                }
                return Err(Error::NonFinite { context: diag });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grads.norm();
        if !grad_norm.is_finite() {
            if let Some(dir) = checkpoint_dir {
                params.save(dir.join("checkpoint_abort.bin"))?;
            }
            return Err(Error::NonFinite { context: format!("step {step}: gradient norm {grad_norm}") });
        }
        let record = StepRecord {
            step,
            loss_total,
            loss_dm: graph.scalar(dm),
            loss_r: r.map_or(0.0, |v| graph.scalar(v)),
            loss_rc: rc.map_or(0.0, |v| graph.scalar(v)),
            loss_g: guidance.map(|(g, _)| graph.scalar(g)),
            loss_gc: guidance.map(|(_, gc)| graph.scalar(gc)),
            grad_norm,
            lr: config.lr_at(step),
            wall_ms: 0.0,
        };
        drop(graph);

        step_params(&mut adam, &mut params, &grads, record.lr);
        if let (Some(e), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            ema_update(e.values_mut(), params.values(), decay);
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                params.save(dir.join(format!("checkpoint_step{step}.bin")))?;
            }
        }
        log.records.push(StepRecord { wall_ms: started.elapsed().as_secs_f64() * 1e3, ..record });
    }

    Ok(TrainOutput { params, ema, log })
}

fn step_params(adam: &mut Adam, params: &mut DenoiserParams, grads: &GradientBuffer, lr: f64) {
    adam.update(params.values_mut(), grads.values(), lr);
}
