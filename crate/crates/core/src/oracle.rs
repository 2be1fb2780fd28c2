//! Closed-form 1-D Gaussian cases for checking the prior-adjustment identity
//! and the regularized upper bound, plus a Bayes-optimal noise predictor.
//!
//! Every density is evaluated in log space. With per-class data laws
//! `q(x0 | y) = N(mu_y, s^2)`:
//!
//! * `q(x_t | y) = N(sqrt(abar_t) mu_y, 1 - abar_t + abar_t s^2)`
//! * `q(x_t)` is the prior-weighted mixture of those
//! * `q(x_{t-1} | x_t)` is the marginal reverse kernel under the imbalanced
//!   (training) prior
//!
//! The composed reverse conditional under prior `pi` is
//! `q(x_{t-1} | x_t) q(x_{t-1} | y) q_pi(x_t) / (q(x_t | y) q_pi(x_{t-1}))`.
//! Under the imbalanced prior it reduces to the exact class posterior. Under
//! the balanced prior it is the adjusted target, which is not normalized and
//! is renormalized on a grid wherever a KL divergence needs it.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{log_sum_exp, ClassModes, MixtureSpec};
use crate::denoiser::{EpsModel, Label};
use crate::error::{config_err, Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorChoice {
    Imbalanced,
    Balanced,
}

/// Uniform 1-D evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { lo: -8.0, hi: 8.0, points: 4001 }
    }
}

impl Grid {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }
}

/// Trapezoid rule on uniform samples.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

#[derive(Debug, Clone)]
pub struct GaussianCase {
    pub means: Vec<f64>,
    pub s: f64,
    pub prior: Vec<f64>,
    pub balanced_prior: Vec<f64>,
    pub schedule: DiffusionSchedule,
    pub grid: Grid,
}

impl GaussianCase {
    /// Case with a uniform balanced prior and the default grid.
    pub fn new(means: Vec<f64>, s: f64, prior: Vec<f64>, schedule: DiffusionSchedule) -> Result<Self> {
        let k = means.len();
        let case = Self { means, s, prior, balanced_prior: vec![1.0 / k as f64; k], schedule, grid: Grid::default() };
        case.validate()?;
        Ok(case)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.prior.len() != k || self.balanced_prior.len() != k {
            return Err(config_err("means and priors must have one entry per class"));
        }
        for p in [&self.prior, &self.balanced_prior] {
            if p.iter().any(|v| !(*v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(config_err("priors must be positive and sum to 1"));
            }
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(config_err("data standard deviation must be finite and >= 0"));
        }
        if self.grid.points < 3 || !(self.grid.hi > self.grid.lo) {
            return Err(config_err("grid needs at least 3 points and hi > lo"));
        }
        // Every noisy marginal has sd <= max(1, s); require 6 sd of headroom.
        let sd = self.s.max(1.0);
        let lo = self.means.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0) - 6.0 * sd;
        let hi = self.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0) + 6.0 * sd;
        if self.grid.lo > lo || self.grid.hi < hi {
            return Err(config_err(format!("grid [{}, {}] does not cover [{lo}, {hi}]", self.grid.lo, self.grid.hi)));
        }
        Ok(())
    }

    fn prior_for(&self, choice: PriorChoice) -> &[f64] {
        match choice {
            PriorChoice::Imbalanced => &self.prior,
            PriorChoice::Balanced => &self.balanced_prior,
        }
    }

    fn noisy_var(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        self.schedule.one_minus_alpha_bar(t) + ab * self.s * self.s
    }

    /// `log q(x_t | y)`.
    pub fn log_class_marginal(&self, t: usize, x: f64, y: usize) -> f64 {
        log_normal(x, self.schedule.alpha_bar(t).sqrt() * self.means[y], self.noisy_var(t))
    }

    /// `log q(x_t)` under the chosen prior.
    pub fn log_marginal(&self, t: usize, x: f64, choice: PriorChoice) -> f64 {
        let terms: Vec<f64> = self
            .prior_for(choice)
            .iter()
            .enumerate()
            .map(|(y, p)| p.ln() + self.log_class_marginal(t, x, y))
            .collect();
        log_sum_exp(&terms)
    }

    /// `log q(x_t | x_{t-1})`.
    pub fn log_forward_kernel(&self, t: usize, x_prev: f64, x_t: f64) -> f64 {
        log_normal(x_t, self.schedule.alpha(t).sqrt() * x_prev, self.schedule.beta(t))
    }

    /// `log q(x_{t-1} | x_t)` under the imbalanced prior.
    pub fn log_reverse_marginal(&self, t: usize, x_prev: f64, x_t: f64) -> f64 {
        self.log_forward_kernel(t, x_prev, x_t) + self.log_marginal(t - 1, x_prev, PriorChoice::Imbalanced)
            - self.log_marginal(t, x_t, PriorChoice::Imbalanced)
    }

    /// Log of the composed reverse conditional.
    pub fn log_reverse_conditional(&self, t: usize, x_prev: f64, x_t: f64, y: usize, choice: PriorChoice) -> f64 {
        self.log_reverse_marginal(t, x_prev, x_t) + self.log_class_marginal(t - 1, x_prev, y)
            + self.log_marginal(t, x_t, choice)
            - self.log_class_marginal(t, x_t, y)
            - self.log_marginal(t - 1, x_prev, choice)
    }

    fn check(&self, t: usize, y: usize) -> Result<()> {
        if t == 0 || t > self.schedule.num_steps() {
            return Err(Error::Timestep { t, max: self.schedule.num_steps() });
        }
        if y >= self.num_classes() {
            return Err(Error::Label { label: y, num_classes: self.num_classes() });
        }
        Ok(())
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Density of the noisy marginal `q(x_t)` under the chosen prior.
pub fn marginal_density(case: &GaussianCase, t: usize, x: f64, prior: PriorChoice) -> Result<f64> {
    if t > case.schedule.num_steps() {
        return Err(Error::Timestep { t, max: case.schedule.num_steps() });
    }
    Ok(case.log_marginal(t, x, prior).exp())
}

pub fn reverse_conditional_density(
    case: &GaussianCase,
    t: usize,
    x_prev: f64,
    x_t: f64,
    y: usize,
    prior: PriorChoice,
) -> Result<f64> {
    case.check(t, y)?;
    let v = case.log_reverse_conditional(t, x_prev, x_t, y, prior);
    if v.is_nan() {
        return Err(Error::NonFinite { context: format!("reverse conditional at t={t}") });
    }
    Ok(v.exp())
}

/// Worst relative residual of the prior-adjustment identity
/// `p* = p * (p(x_{t-1}) / p*(x_{t-1})) * (q*(x_t) / q(x_t))` over all classes,
/// all grid points for `x_{t-1}` and every `stride`-th grid point for `x_t`.
pub fn verify_prop1(case: &GaussianCase, t: usize, grid: &Grid, stride: usize) -> Result<f64> {
    case.check(t, 0)?;
    let k = case.num_classes();
    let xs = grid.values();
    // Terms that depend on x_{t-1} alone are shared by every x_t.
    let prev_class: Vec<Vec<f64>> = xs.iter().map(|&x| (0..k).map(|y| case.log_class_marginal(t - 1, x, y)).collect()).collect();
    let prev_imb: Vec<f64> = xs.iter().map(|&x| case.log_marginal(t - 1, x, PriorChoice::Imbalanced)).collect();
    let prev_bal: Vec<f64> = xs.iter().map(|&x| case.log_marginal(t - 1, x, PriorChoice::Balanced)).collect();
    let mut worst = 0.0f64;
    for &x_t in xs.iter().step_by(stride.max(1)) {
        let t_imb = case.log_marginal(t, x_t, PriorChoice::Imbalanced);
        let t_bal = case.log_marginal(t, x_t, PriorChoice::Balanced);
        let t_class: Vec<f64> = (0..k).map(|y| case.log_class_marginal(t, x_t, y)).collect();
        let adj_t = t_bal - t_imb;
        for (i, &x_prev) in xs.iter().enumerate() {
            let adj_prev = prev_imb[i] - prev_bal[i];
            let rev = case.log_forward_kernel(t, x_prev, x_t) + prev_imb[i] - t_imb;
            for y in 0..k {
                // log p(x_{t-1} | x_t, y) under each prior, as in `log_reverse_conditional`
                let lhs = rev + prev_class[i][y] + t_bal - t_class[y] - prev_bal[i];
                let rhs = rev + prev_class[i][y] + t_imb - t_class[y] - prev_imb[i] + adj_prev + adj_t;
                worst = worst.max((rhs - lhs).exp_m1().abs());
            }
        }
    }
    Ok(worst)
}

/// Monte-Carlo estimates for the bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop2Report {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the paired difference `rhs - lhs`.
    pub stderr: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
}

impl Prop2Report {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn holds(&self, sigmas: f64) -> bool {
        self.lhs <= self.rhs + sigmas * self.stderr
    }
}

/// Points per local quadrature grid in [`verify_prop2_bound`].
pub const LOCAL_GRID_POINTS: usize = 2001;
/// Half-width of the local grid in units of `sqrt(beta_t / alpha_t)`.
pub const LOCAL_GRID_HALF_WIDTH: f64 = 14.0;

/// Estimates `lhs = E KL(q(x_{t-1} | x_t, x0) || p*(. | x_t, y))` and
/// `rhs = E [KL(q(x_{t-1} | x_t, x0) || p(. | x_t, y)) + tau t sum_y' q*(y') KL(p(. | x_t) || p(. | x_t, y'))]`
/// over draws `(y, x0, x_t)` from the imbalanced data law. Each KL is a
/// trapezoid quadrature on a grid centred at `x_t / sqrt(alpha_t)`.
pub fn verify_prop2_bound(case: &GaussianCase, t: usize, mc_samples: usize, seed: u64, tau: f64) -> Result<Prop2Report> {
    if mc_samples < 2 {
        return Err(config_err("verify_prop2_bound needs at least 2 samples"));
    }
    if t < 2 {
        // At t = 1 the forward posterior is a point mass and the KL is infinite.
        return Err(config_err("verify_prop2_bound needs t >= 2"));
    }
    case.check(t, 0)?;
    let sched = &case.schedule;
    let k = case.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = LOCAL_GRID_HALF_WIDTH * (sched.beta(t) / sched.alpha(t)).sqrt();
    let n = LOCAL_GRID_POINTS;
    let h = 2.0 * half / (n - 1) as f64;
    let mut diffs = Vec::with_capacity(mc_samples);
    let mut lhs_v = Vec::with_capacity(mc_samples);
    let mut rhs_v = Vec::with_capacity(mc_samples);
    let cum: Vec<f64> = case.prior.iter().scan(0.0, |a, p| { *a += p; Some(*a) }).collect();

    let mut log_q = vec![0.0; n];
    let mut log_p = vec![0.0; n];
    let mut log_ps = vec![0.0; n];
    let mut log_u = vec![0.0; n];
    let mut log_py = vec![vec![0.0; n]; k];
    let log_prior: Vec<f64> = case.prior.iter().map(|p| p.ln()).collect();
    let log_balanced: Vec<f64> = case.balanced_prior.iter().map(|p| p.ln()).collect();
    let (mut prev, mut weighted, mut weighted_bal) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    // log q(x_{t-1} | c), unrolled for the inner grid loop
    let prev_scale = sched.alpha_bar(t - 1).sqrt();
    let prev_var = case.noisy_var(t - 1);
    let prev_norm = -0.5 * (2.0 * PI * prev_var).ln();
    for _ in 0..mc_samples {
        let u: f64 = rng.random();
        let y = cum.iter().position(|c| u < *c).unwrap_or(k - 1);
        let x0 = case.means[y] + case.s * rng.sample::<f64, _>(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let x_t = sched.alpha_bar(t).sqrt() * x0 + sched.one_minus_alpha_bar(t).sqrt() * e;
        let (pm, pv) = sched.posterior_params(&[x_t], &[x0], t)?;
        let centre = x_t / sched.alpha(t).sqrt();
        let m_t = [
            case.log_marginal(t, x_t, PriorChoice::Imbalanced),
            case.log_marginal(t, x_t, PriorChoice::Balanced),
        ];
        let c_t: Vec<f64> = (0..k).map(|c| case.log_class_marginal(t, x_t, c)).collect();
        for i in 0..n {
            let xp = centre - half + h * i as f64;
            for c in 0..k {
                let d = xp - prev_scale * case.means[c];
                prev[c] = prev_norm - d * d / (2.0 * prev_var);
                weighted[c] = log_prior[c] + prev[c];
                weighted_bal[c] = log_balanced[c] + prev[c];
            }
            let m_prev_imb = log_sum_exp(&weighted);
            let m_prev_bal = log_sum_exp(&weighted_bal);
            let fwd = case.log_forward_kernel(t, xp, x_t);
            let rev = fwd + m_prev_imb - m_t[0];
            log_q[i] = log_normal(xp, pm[0], pv);
            log_u[i] = rev;
            for c in 0..k {
                log_py[c][i] = rev + prev[c] + m_t[0] - c_t[c] - m_prev_imb;
            }
            log_p[i] = log_py[y][i];
            log_ps[i] = rev + prev[y] + m_t[1] - c_t[y] - m_prev_bal;
        }
        let lhs = grid_kl(&log_q, &log_ps, h);
        let dm = grid_kl(&log_q, &log_p, h);
        let reg: f64 = (0..k).map(|c| case.balanced_prior[c] * grid_kl(&log_u, &log_py[c], h)).sum();
        let rhs = dm + tau * t as f64 * reg;
        lhs_v.push(lhs);
        rhs_v.push(rhs);
        diffs.push(rhs - lhs);
    }
    let (lhs, lhs_stderr) = mean_stderr(&lhs_v);
    let (rhs, rhs_stderr) = mean_stderr(&rhs_v);
    let (_, stderr) = mean_stderr(&diffs);
    Ok(Prop2Report { lhs, rhs, stderr, lhs_stderr, rhs_stderr })
}

/// `KL(a || b)` for log-densities sampled on a uniform grid; both sides are
/// renormalized on the grid first.
pub fn grid_kl(log_a: &[f64], log_b: &[f64], step: f64) -> f64 {
    let la = log_normalizer(log_a, step);
    let lb = log_normalizer(log_b, step);
    let integrand: Vec<f64> = log_a
        .iter()
        .zip(log_b)
        .map(|(a, b)| {
            let pa = (a - la).exp();
            if pa == 0.0 { 0.0 } else { pa * ((a - la) - (b - lb)) }
        })
        .collect();
    trapezoid(&integrand, step)
}

fn log_normalizer(log_v: &[f64], step: f64) -> f64 {
    let m = log_v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_v.iter().map(|v| (v - m).exp()).collect();
    m + trapezoid(&scaled, step).ln()
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Bayes-optimal noise predictor for data laws that are mixtures of isotropic
/// Gaussians with a shared standard deviation (which may be 0).
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    data_dim: usize,
    sigma: f64,
    classes: Vec<ClassModes>,
    prior: Vec<f64>,
    schedule: DiffusionSchedule,
}

impl AnalyticDenoiser {
    /// `prior` weights the classes for null-label (unconditional) predictions.
    pub fn from_spec(spec: &MixtureSpec, prior: &[f64], schedule: &DiffusionSchedule) -> Result<Self> {
        if prior.len() != spec.num_classes() {
            return Err(Error::Dimension { expected: spec.num_classes(), got: prior.len() });
        }
        let total: f64 = prior.iter().sum();
        Ok(Self {
            data_dim: spec.data_dim,
            sigma: spec.sigma,
            classes: spec.classes.clone(),
            prior: prior.iter().map(|p| p / total).collect(),
            schedule: schedule.clone(),
        })
    }

    /// `E[eps | x_t, y]` for one point.
    pub fn eps(&self, x: &[f64], y: Label, t: usize) -> Result<Vec<f64>> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let var = self.schedule.one_minus_alpha_bar(t) + ab * self.sigma * self.sigma;
        // Components (log weight, centre) of q(x0 | y) or the prior mixture.
        let mut comps: Vec<(f64, &[f64])> = Vec::new();
        let mut push_class = |k: usize, lw: f64| {
            for (c, w) in self.classes[k].centers.iter().zip(&self.classes[k].weights) {
                comps.push((lw + w.ln(), c));
            }
        };
        match y {
            Label::Class(k) if k < self.classes.len() => push_class(k, 0.0),
            Label::Class(k) => return Err(Error::Label { label: k, num_classes: self.classes.len() }),
            Label::Null => {
                for (k, p) in self.prior.iter().enumerate() {
                    if *p > 0.0 {
                        push_class(k, p.ln());
                    }
                }
            }
        }
        let logits: Vec<f64> = comps
            .iter()
            .map(|(lw, c)| {
                let d2: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - sab * b) * (a - sab * b)).sum();
                lw - d2 / (2.0 * var)
            })
            .collect();
        let lse = log_sum_exp(&logits);
        let shrink = sab * self.sigma * self.sigma / var;
        let mut x0 = vec![0.0; self.data_dim];
        for ((_, c), l) in comps.iter().zip(&logits) {
            let r = (l - lse).exp();
            for ((m, xi), ci) in x0.iter_mut().zip(x).zip(c.iter()) {
                *m += r * (ci + shrink * (xi - sab * ci));
            }
        }
        let s = self.schedule.one_minus_alpha_bar(t).sqrt();
        Ok(x.iter().zip(&x0).map(|(xi, m)| (xi - sab * m) / s).collect())
    }
}

impl EpsModel for AnalyticDenoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn supports_omega(&self) -> bool {
        false
    }

    fn predict_batch(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Mat> {
        if omega.is_some() {
            return Err(Error::Omega("the analytic denoiser takes no guidance strength".into()));
        }
        if x.cols != self.data_dim {
            return Err(Error::Dimension { expected: self.data_dim, got: x.cols });
        }
        if labels.len() != x.rows || ts.len() != x.rows {
            return Err(Error::Dimension { expected: x.rows, got: labels.len().min(ts.len()) });
        }
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let e = self.eps(x.row(i), labels[i], ts[i])?;
            out.row_mut(i).copy_from_slice(&e);
        }
        Ok(out)
    }
}

/// Analytic denoiser for a 1-D case; null labels use the imbalanced prior.
pub fn analytic_denoiser(case: &GaussianCase) -> AnalyticDenoiser {
    AnalyticDenoiser {
        data_dim: 1,
        sigma: case.s,
        classes: case.means.iter().map(|m| ClassModes { centers: vec![vec![*m]], weights: vec![1.0] }).collect(),
        prior: case.prior.clone(),
        schedule: case.schedule.clone(),
    }
}

/// One line of an oracle report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub case_id: String,
    pub t: usize,
    pub residual: Option<f64>,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub stderr: Option<f64>,
}

pub fn write_oracle_csv(rows: &[OracleRow], mut w: impl Write) -> Result<()> {
    let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    writeln!(w, "case_id,t,residual,lhs,rhs,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.case_id, r.t, f(r.residual), f(r.lhs), f(r.rhs), f(r.stderr))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_schedule;

    fn case(prior: Vec<f64>) -> GaussianCase {
        GaussianCase::new(vec![-1.0, 1.5], 0.3, prior, build_schedule(100, 1e-4, 0.02).unwrap()).unwrap()
    }

    #[test]
    fn trapezoid_of_linear_is_exact() {
        let g = Grid { lo: 0.0, hi: 2.0, points: 5 };
        let v: Vec<f64> = g.values().iter().map(|x| 3.0 * x + 1.0).collect();
        assert!((trapezoid(&v, g.step()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn imbalanced_reverse_conditional_is_class_posterior() {
        let c = case(vec![0.9, 0.1]);
        let t = 10;
        let direct = c.log_forward_kernel(t, 0.3, 0.5) + c.log_class_marginal(t - 1, 0.3, 1) - c.log_class_marginal(t, 0.5, 1);
        let composed = c.log_reverse_conditional(t, 0.3, 0.5, 1, PriorChoice::Imbalanced);
        assert!((direct - composed).abs() < 1e-10);
    }

    #[test]
    fn grid_must_cover_marginals() {
        let mut c = case(vec![0.5, 0.5]);
        c.grid = Grid { lo: -3.0, hi: 3.0, points: 101 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn analytic_eps_of_point_mass() {
        let s = build_schedule(50, 1e-4, 0.02).unwrap();
        let spec = MixtureSpec { data_dim: 1, sigma: 0.0, classes: vec![ClassModes { centers: vec![vec![2.0]], weights: vec![1.0] }] };
        let d = AnalyticDenoiser::from_spec(&spec, &[1.0], &s).unwrap();
        let t = 20;
        let e = d.eps(&[0.7], Label::Class(0), t).unwrap()[0];
        let want = (0.7 - s.alpha_bar(t).sqrt() * 2.0) / s.one_minus_alpha_bar(t).sqrt();
        assert!((e - want).abs() < 1e-12);
    }
}
