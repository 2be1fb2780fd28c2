//! Reverse-process generation: ancestral DDPM, deterministic DDIM,
//! classifier-free guidance and single-pass trainable guidance.
//!
//! Chains for one request run as a batch. Chain `i` draws its starting noise
//! and per-step noise from its own ChaCha stream `(seed, i)`, so a chain's
//! trajectory does not depend on how many chains run alongside it.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LongTailDataset;
use crate::denoiser::{EpsModel, Label};
use crate::error::{config_err, Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub label: Label,
    pub omega: f64,
    pub num_samples: usize,
    pub method: SampleMethod,
    pub ddim_steps: usize,
    pub seed: u64,
    pub use_tcfg: bool,
}

impl SampleRequest {
    pub fn ddpm(label: Label, omega: f64, num_samples: usize, seed: u64) -> Self {
        Self { label, omega, num_samples, method: SampleMethod::Ddpm, ddim_steps: 0, seed, use_tcfg: false }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Omega(format!("guidance strength must be finite and >= 0, got {}", self.omega)));
        }
        if self.method == SampleMethod::Ddim {
            let t = schedule.num_steps();
            if self.ddim_steps == 0 || self.ddim_steps > t || !t.is_multiple_of(self.ddim_steps) {
                return Err(config_err(format!("ddim_steps={} must divide T={t}", self.ddim_steps)));
            }
        }
        if self.use_tcfg && self.label == Label::Null {
            return Err(Error::Omega("trainable guidance needs a class label".into()));
        }
        Ok(())
    }
}

/// Wraps a model and counts batched network evaluations and evaluated rows.
pub struct CountingModel<'a, M: EpsModel + ?Sized> {
    inner: &'a M,
    calls: AtomicUsize,
    rows: AtomicUsize,
}

impl<'a, M: EpsModel + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: AtomicUsize::new(0), rows: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn rows(&self) -> usize {
        self.rows.load(Ordering::Relaxed)
    }
}

impl<M: EpsModel + ?Sized> EpsModel for CountingModel<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn supports_omega(&self) -> bool {
        self.inner.supports_omega()
    }

    fn predict_batch(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Mat> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.rows.fetch_add(x.rows, Ordering::Relaxed);
        self.inner.predict_batch(x, labels, ts, omega)
    }
}

/// `(1 + omega) eps(x, y, t) - omega eps(x, Null, t)`, two evaluations.
pub fn cfg_eps<M: EpsModel + ?Sized>(model: &M, x_t: &[f64], y: Label, t: usize, omega: f64) -> Result<Vec<f64>> {
    let x = Mat::from_vec(1, x_t.len(), x_t.to_vec());
    Ok(cfg_eps_batch(model, &x, y, t, omega)?.data)
}

/// Batched [`cfg_eps`] for a shared label and timestep.
pub fn cfg_eps_batch<M: EpsModel + ?Sized>(model: &M, x: &Mat, y: Label, t: usize, omega: f64) -> Result<Mat> {
    if y == Label::Null {
        return Err(Error::Label { label: usize::MAX, num_classes: model.num_classes() });
    }
    let ts = vec![t; x.rows];
    let cond = model.predict_batch(x, &vec![y; x.rows], &ts, None)?;
    let uncond = model.predict_batch(x, &vec![Label::Null; x.rows], &ts, None)?;
    Ok(combine(&cond, &uncond, omega))
}

fn combine(cond: &Mat, uncond: &Mat, omega: f64) -> Mat {
    let data = cond.data.iter().zip(&uncond.data).map(|(c, u)| (1.0 + omega) * c - omega * u).collect();
    Mat::from_vec(cond.rows, cond.cols, data)
}

/// Noise prediction used by the samplers for one step.
fn guided_eps<M: EpsModel + ?Sized>(model: &M, x: &Mat, req: &SampleRequest, t: usize) -> Result<Mat> {
    let ts = vec![t; x.rows];
    if req.use_tcfg {
        let omegas = vec![req.omega; x.rows];
        return model.predict_batch(x, &vec![req.label; x.rows], &ts, Some(&omegas));
    }
    match req.label {
        Label::Null => model.predict_batch(x, &vec![Label::Null; x.rows], &ts, None),
        // (1 + 0) c - 0 u == c exactly, so the unconditional pass is skipped.
        y if req.omega == 0.0 => model.predict_batch(x, &vec![y; x.rows], &ts, None),
        y => cfg_eps_batch(model, x, y, t, req.omega),
    }
}

fn chain_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect()
}

fn initial_state(rngs: &mut [ChaCha8Rng], d: usize) -> Mat {
    let mut x = Mat::zeros(rngs.len(), d);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    x
}

fn check_finite(x: &Mat, t: usize) -> Result<()> {
    if x.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("sampler state at t={t}") })
    }
}

fn check_model<M: EpsModel + ?Sized>(model: &M, req: &SampleRequest) -> Result<()> {
    if req.use_tcfg && !model.supports_omega() {
        return Err(Error::Omega("model has no omega embedding".into()));
    }
    if let Label::Class(k) = req.label {
        if k >= model.num_classes() {
            return Err(Error::Label { label: k, num_classes: model.num_classes() });
        }
    }
    Ok(())
}

/// Ancestral sampling with reverse variance equal to the posterior variance.
pub fn ddpm_sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    req: &SampleRequest,
) -> Result<Vec<Vec<f64>>> {
    if req.method != SampleMethod::Ddpm {
        return Err(config_err("ddpm_sample called with a non-DDPM request"));
    }
    req.validate(schedule)?;
    check_model(model, req)?;
    let d = model.data_dim();
    let mut rngs = chain_rngs(req.seed, req.num_samples);
    let mut x = initial_state(&mut rngs, d);
    for t in (1..=schedule.num_steps()).rev() {
        let eps = guided_eps(model, &x, req, t)?;
        let alpha = schedule.alpha(t);
        let coef = schedule.beta(t) / schedule.one_minus_alpha_bar(t).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sd = schedule.posterior_var(t).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let e = eps.row(i).to_vec();
            for (v, e) in x.row_mut(i).iter_mut().zip(e) {
                *v = inv_sqrt_alpha * (*v - coef * e);
                if t > 1 {
                    *v += sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        check_finite(&x, t)?;
    }
    Ok(x.to_rows())
}

/// Timesteps visited by DDIM, descending, with uniform stride `T / steps`.
pub fn ddim_timesteps(num_steps: usize, ddim_steps: usize) -> Result<Vec<usize>> {
    if ddim_steps == 0 || ddim_steps > num_steps || !num_steps.is_multiple_of(ddim_steps) {
        return Err(config_err(format!("ddim_steps={ddim_steps} must divide T={num_steps}")));
    }
    let stride = num_steps / ddim_steps;
    Ok((1..=ddim_steps).rev().map(|i| i * stride).collect())
}

/// Deterministic DDIM (eta = 0) from a given starting state.
pub fn ddim_from<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    req: &SampleRequest,
    mut x: Mat,
) -> Result<Mat> {
    let steps = ddim_timesteps(schedule.num_steps(), req.ddim_steps)?;
    let stride = schedule.num_steps() / req.ddim_steps;
    for &t in &steps {
        let eps = guided_eps(model, &x, req, t)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - stride);
        let s_t = schedule.one_minus_alpha_bar(t).sqrt();
        let s_prev = if t == stride { 0.0 } else { schedule.one_minus_alpha_bar(t - stride).sqrt() };
        for i in 0..x.rows {
            let e = eps.row(i).to_vec();
            for (v, e) in x.row_mut(i).iter_mut().zip(e) {
                let x0 = (*v - s_t * e) / ab.sqrt();
                *v = ab_prev.sqrt() * x0 + s_prev * e;
            }
        }
        check_finite(&x, t)?;
    }
    Ok(x)
}

pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    req: &SampleRequest,
) -> Result<Vec<Vec<f64>>> {
    if req.method != SampleMethod::Ddim {
        return Err(config_err("ddim_sample called with a non-DDIM request"));
    }
    req.validate(schedule)?;
    check_model(model, req)?;
    let mut rngs = chain_rngs(req.seed, req.num_samples);
    let x = initial_state(&mut rngs, model.data_dim());
    Ok(ddim_from(model, schedule, req, x)?.to_rows())
}

/// Guided sampling with the strength fed to the network: one evaluation per step.
pub fn tcfg_sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    req: &SampleRequest,
) -> Result<Vec<Vec<f64>>> {
    if !req.use_tcfg {
        return Err(config_err("tcfg_sample needs use_tcfg"));
    }
    if !model.supports_omega() {
        return Err(Error::Omega("model has no omega embedding".into()));
    }
    sample(model, schedule, req)
}

/// Dispatches on `req.method`.
pub fn sample<M: EpsModel + ?Sized>(model: &M, schedule: &DiffusionSchedule, req: &SampleRequest) -> Result<Vec<Vec<f64>>> {
    match req.method {
        SampleMethod::Ddpm => ddpm_sample(model, schedule, req),
        SampleMethod::Ddim => ddim_sample(model, schedule, req),
    }
}

/// Per-class seed derived from a base seed.
pub fn class_seed(seed: u64, class: usize) -> u64 {
    seed.wrapping_add((class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Samples `counts[k]` points for every class `k` using `base` for the
/// remaining request fields, and returns them as a labelled dataset.
pub fn sample_dataset<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    base: &SampleRequest,
    counts: &[usize],
) -> Result<LongTailDataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let req = SampleRequest { label: Label::Class(k), num_samples: n, seed: class_seed(base.seed, k), ..base.clone() };
        rows.extend(sample(model, schedule, &req)?);
        labels.extend(std::iter::repeat_n(k, n));
    }
    LongTailDataset::from_samples(rows, labels, counts.len())
}
