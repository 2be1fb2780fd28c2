//! Linear variance schedule for the forward noising chain.
//!
//! Timesteps are 1-indexed: `t = 0` denotes clean data, `t = T` the final
//! noisy state. All per-step tables are stored 0-indexed by `t - 1`, with
//! accessor methods taking the 1-indexed `t`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Per-step quantities of the forward process `q(x_t | x_{t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `1 - alpha_bar_t`, computed through `expm1` so it keeps full relative
    /// precision when the betas are tiny.
    one_minus_alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Serializable schedule parameters as they appear in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Builds a schedule with betas interpolated linearly from `beta1` to `beta_t`.
pub fn build_schedule(num_steps: usize, beta1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if num_steps < 2 {
        return Err(config_err(format!("timestep count must be >= 2, got {num_steps}")));
    }
    if !(beta1 > 0.0 && beta1 < 1.0) || !(beta_t > 0.0 && beta_t < 1.0) {
        return Err(config_err(format!(
            "betas must lie in (0, 1), got beta1={beta1}, betaT={beta_t}"
        )));
    }
    if beta1 > beta_t {
        return Err(config_err(format!(
            "beta1 must not exceed betaT, got beta1={beta1} > betaT={beta_t}"
        )));
    }

    let span = (num_steps - 1) as f64;
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| beta1 + (beta_t - beta1) * (i as f64 / span))
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();

    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut one_minus_alpha_bars = Vec::with_capacity(num_steps);
    let mut running = 1.0;
    let mut log_running = 0.0;
    for &b in &betas {
        running *= 1.0 - b;
        log_running += (-b).ln_1p();
        alpha_bars.push(running);
        one_minus_alpha_bars.push(-log_running.exp_m1());
    }

    let posterior_vars = (0..num_steps)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                betas[i] * one_minus_alpha_bars[i - 1] / one_minus_alpha_bars[i]
            }
        })
        .collect();

    Ok(DiffusionSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
        one_minus_alpha_bars,
        posterior_vars,
    })
}

impl DiffusionSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            Err(Error::Timestep { t, max: self.num_steps })
        } else {
            Ok(())
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `1 - alpha_bar_t`, with the value 0 at `t = 0`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean `c_x0 * x0 + c_xt * x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = self.one_minus_alpha_bar(t);
        let c0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        let ct = self.alpha(t).sqrt() * self.one_minus_alpha_bar(t - 1) / denom;
        (c0, ct)
    }

    /// Samples `q(x_t | x_0)` with externally supplied standard-normal noise.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Dimension { expected: x0.len(), got: eps.len() });
        }
        let a = self.alpha_bar(t).sqrt();
        let s = self.one_minus_alpha_bar(t).sqrt();
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Mean and variance of the forward-chain posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_params(&self, x_t: &[f64], x0: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        self.check_t(t)?;
        if x0.len() != x_t.len() {
            return Err(Error::Dimension { expected: x_t.len(), got: x0.len() });
        }
        let (c0, ct) = self.posterior_mean_coefs(t);
        let mean = x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect();
        Ok((mean, self.posterior_var(t)))
    }
}
