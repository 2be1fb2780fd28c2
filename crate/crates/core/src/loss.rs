//! Training objectives.
//!
//! * plain denoising loss `||eps_hat - eps||^2`
//! * the class-balancing objective: denoising loss plus the `t`-weighted
//!   cross-class regularizer `||eps(x,y) - sg(eps(x,y'))||^2` and its
//!   commitment mirror `||sg(eps(x,y)) - eps(x,y')||^2`
//! * the trainable-guidance pair that teaches an omega-conditioned output to
//!   reproduce the classifier-free guided prediction
//!
//! Batched builders record into a [`Graph`]; every per-sample loss is
//! averaged over the batch rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Graph, Label, LossClosure, Var};
use crate::error::{config_err, Error, Result};
use crate::tensor::Mat;

/// Squared Euclidean distance between a prediction and the true noise.
pub fn ddpm_loss(eps_hat: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_hat.len() != eps.len() {
        return Err(Error::Dimension { expected: eps.len(), got: eps_hat.len() });
    }
    Ok(eps_hat.iter().zip(eps).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Target label distribution for the regularizer's `y'` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSetMode {
    /// Proportional to the training counts `n_k`.
    Train,
    /// Proportional to `sqrt(n_k)`.
    Sqrt,
    /// Uniform over classes.
    Balanced,
}

impl LabelSetMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelSetMode::Train => "train",
            LabelSetMode::Sqrt => "sqrt",
            LabelSetMode::Balanced => "balanced",
        }
    }
}

impl std::str::FromStr for LabelSetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "sqrt" => Ok(Self::Sqrt),
            "balanced" => Ok(Self::Balanced),
            other => Err(config_err(format!("unknown label-set mode '{other}'"))),
        }
    }
}

/// Categorical sampler over classes for a given mode and class-count profile.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSampler {
    mode: LabelSetMode,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl LabelSampler {
    pub fn new(mode: LabelSetMode, class_counts: &[usize]) -> Result<Self> {
        if class_counts.is_empty() || class_counts.iter().all(|&n| n == 0) {
            return Err(config_err("label-set sampling needs at least one nonzero class count"));
        }
        let weights: Vec<f64> = class_counts
            .iter()
            .map(|&n| match mode {
                LabelSetMode::Train => n as f64,
                LabelSetMode::Sqrt => (n as f64).sqrt(),
                LabelSetMode::Balanced => 1.0,
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { mode, probs, cdf })
    }

    pub fn mode(&self) -> LabelSetMode {
        self.mode
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let last = self.cdf.len() - 1;
        self.cdf.iter().position(|&c| u < c).unwrap_or(last)
    }

    pub fn sample(&self, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if size == 0 {
            return Err(config_err("label-set size must be >= 1"));
        }
        Ok((0..size).map(|_| self.draw(rng)).collect())
    }
}

/// i.i.d. draws of `size` labels from the mode's target distribution.
pub fn sample_label_set(
    mode: LabelSetMode,
    class_counts: &[usize],
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    LabelSampler::new(mode, class_counts)?.sample(size, rng)
}

/// Regularizer weight `tau`, commitment weight `gamma`, and label-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbdmWeights {
    pub tau: f64,
    pub gamma: f64,
    pub set_size: usize,
}

impl Default for CbdmWeights {
    fn default() -> Self {
        Self { tau: 0.001, gamma: 0.25, set_size: 1 }
    }
}

impl CbdmWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(config_err(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config_err(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.set_size == 0 {
            return Err(config_err("label-set size must be >= 1"));
        }
        Ok(())
    }

    /// True when `tau * t` can exceed 1 at the last step.
    pub fn exceeds_unit_weight(&self, num_timesteps: usize) -> bool {
        self.tau * num_timesteps as f64 > 1.0
    }
}

/// One training batch for the class-balancing objective.
#[derive(Debug, Clone, Copy)]
pub struct CbdmBatch<'a> {
    pub x_t: &'a Mat,
    pub labels: &'a [Label],
    pub ts: &'a [usize],
    pub eps: &'a Mat,
    /// Row `i` holds the `y'` draws for sample `i`.
    pub label_sets: &'a [Vec<usize>],
    pub weights: CbdmWeights,
}

/// Graph handles of the batch-mean loss terms.
#[derive(Debug, Clone, Copy)]
pub struct CbdmTerms {
    pub total: Var,
    pub dm: Var,
    /// `tau t / |Y| * sum ||eps(y) - sg(eps(y'))||^2`
    pub r: Var,
    /// `tau t / |Y| * sum ||sg(eps(y)) - eps(y')||^2`, before the `gamma` factor.
    pub rc: Var,
    /// The conditional prediction `eps(x_t, y)`, reusable by other terms.
    pub cond: Var,
}

/// Records the class-balancing loss for a batch.
pub fn build_cbdm(graph: &mut Graph<'_>, batch: CbdmBatch<'_>) -> Result<CbdmTerms> {
    batch.weights.validate()?;
    let n = batch.x_t.rows;
    if batch.label_sets.len() != n {
        return Err(Error::Dimension { expected: n, got: batch.label_sets.len() });
    }
    let set_size = batch.weights.set_size;
    if let Some(bad) = batch.label_sets.iter().find(|s| s.len() != set_size) {
        if bad.is_empty() {
            return Err(config_err("empty label set"));
        }
        return Err(Error::Dimension { expected: set_size, got: bad.len() });
    }

    let cond = graph.eps(batch.x_t, batch.labels, batch.ts, None)?;
    let target = graph.constant(batch.eps.clone());
    let diff = graph.sub(cond, target)?;
    let dm_rows = graph.sq_norm(diff);
    let dm = graph.mean(dm_rows);

    let cond_sg = graph.stop_grad(cond);
    let mut r_acc: Option<Var> = None;
    let mut rc_acc: Option<Var> = None;
    for j in 0..set_size {
        let other: Vec<Label> = batch.label_sets.iter().map(|s| Label::Class(s[j])).collect();
        let alt = graph.eps(batch.x_t, &other, batch.ts, None)?;
        let alt_sg = graph.stop_grad(alt);
        let d_r = graph.sub(cond, alt_sg)?;
        let r_rows = graph.sq_norm(d_r);
        let d_rc = graph.sub(cond_sg, alt)?;
        let rc_rows = graph.sq_norm(d_rc);
        r_acc = Some(match r_acc {
            Some(acc) => graph.add(acc, r_rows)?,
            None => r_rows,
        });
        rc_acc = Some(match rc_acc {
            Some(acc) => graph.add(acc, rc_rows)?,
            None => rc_rows,
        });
    }
    let row_w: Vec<f64> = batch
        .ts
        .iter()
        .map(|&t| batch.weights.tau * t as f64 / set_size as f64)
        .collect();
    let r_rows = graph.row_scale(r_acc.expect("set_size >= 1"), row_w.clone())?;
    let rc_rows = graph.row_scale(rc_acc.expect("set_size >= 1"), row_w)?;
    let r = graph.mean(r_rows);
    let rc = graph.mean(rc_rows);
    let rc_weighted = graph.scale(rc, batch.weights.gamma);
    let reg = graph.add(r, rc_weighted)?;
    let total = graph.add(dm, reg)?;
    Ok(CbdmTerms { total, dm, r, rc, cond })
}

/// Records the plain denoising loss for a batch.
pub fn build_ddpm(graph: &mut Graph<'_>, x_t: &Mat, labels: &[Label], ts: &[usize], eps: &Mat) -> Result<(Var, Var)> {
    let cond = graph.eps(x_t, labels, ts, None)?;
    let target = graph.constant(eps.clone());
    let diff = graph.sub(cond, target)?;
    let rows = graph.sq_norm(diff);
    Ok((graph.mean(rows), cond))
}

/// Single-sample class-balancing loss, usable with [`crate::denoiser::backward`].
#[derive(Debug, Clone)]
pub struct CbdmLoss {
    pub x_t: Vec<f64>,
    pub y: Label,
    pub t: usize,
    pub eps: Vec<f64>,
    pub label_set: Vec<usize>,
    pub weights: CbdmWeights,
}

/// Packages one sample's class-balancing loss as a closure.
pub fn cbdm_loss(
    x_t: &[f64],
    y: Label,
    t: usize,
    eps: &[f64],
    label_set: &[usize],
    weights: CbdmWeights,
) -> Result<CbdmLoss> {
    if label_set.is_empty() {
        return Err(config_err("empty label set"));
    }
    if x_t.len() != eps.len() {
        return Err(Error::Dimension { expected: x_t.len(), got: eps.len() });
    }
    let weights = CbdmWeights { set_size: label_set.len(), ..weights };
    weights.validate()?;
    Ok(CbdmLoss {
        x_t: x_t.to_vec(),
        y,
        t,
        eps: eps.to_vec(),
        label_set: label_set.to_vec(),
        weights,
    })
}

impl CbdmLoss {
    pub fn build_terms(&self, graph: &mut Graph<'_>) -> Result<CbdmTerms> {
        let d = self.x_t.len();
        let x = Mat::from_vec(1, d, self.x_t.clone());
        let eps = Mat::from_vec(1, d, self.eps.clone());
        let sets = vec![self.label_set.clone()];
        build_cbdm(
            graph,
            CbdmBatch {
                x_t: &x,
                labels: &[self.y],
                ts: &[self.t],
                eps: &eps,
                label_sets: &sets,
                weights: self.weights,
            },
        )
    }
}

impl LossClosure for CbdmLoss {
    fn build(&self, graph: &mut Graph<'_>) -> Result<Var> {
        Ok(self.build_terms(graph)?.total)
    }
}

/// Range of guidance strengths used to train the omega embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcfgConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    /// Weight of the guidance commitment term.
    pub gc_weight: f64,
}

impl Default for TcfgConfig {
    fn default() -> Self {
        Self { omega_min: 0.0, omega_max: 2.0, gc_weight: 0.25 }
    }
}

impl TcfgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_min.is_finite() && self.omega_max.is_finite()) || self.omega_min > self.omega_max {
            return Err(config_err(format!(
                "invalid omega range [{}, {}]",
                self.omega_min, self.omega_max
            )));
        }
        if !(self.gc_weight >= 0.0 && self.gc_weight.is_finite()) {
            return Err(config_err("gc_weight must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn contains(&self, omega: f64) -> bool {
        omega >= self.omega_min && omega <= self.omega_max
    }
}

/// Graph handles of the batch-mean guidance terms.
#[derive(Debug, Clone, Copy)]
pub struct TcfgTerms {
    pub total: Var,
    pub g: Var,
    pub gc: Var,
}

/// Records the trainable-guidance losses.
///
/// `cond` may carry an already recorded `eps(x_t, y)` (no omega) so that the
/// conditional branch is shared with the class-balancing terms.
#[allow(clippy::too_many_arguments)]
pub fn build_tcfg(
    graph: &mut Graph<'_>,
    x_t: &Mat,
    labels: &[Label],
    ts: &[usize],
    eps: &Mat,
    omegas: &[f64],
    range: &TcfgConfig,
    cond: Option<Var>,
) -> Result<TcfgTerms> {
    range.validate()?;
    if let Some(w) = omegas.iter().find(|w| !range.contains(**w)) {
        return Err(Error::Omega(format!(
            "omega {w} outside the configured range [{}, {}]",
            range.omega_min, range.omega_max
        )));
    }
    let guided = graph.eps(x_t, labels, ts, Some(omegas))?;
    let cond = match cond {
        Some(v) => v,
        None => graph.eps(x_t, labels, ts, None)?,
    };
    let nulls = vec![Label::Null; x_t.rows];
    let uncond = graph.eps(x_t, &nulls, ts, None)?;
    let gap = graph.sub(cond, uncond)?;
    let guide = graph.row_scale(gap, omegas.to_vec())?;
    let target = graph.constant(eps.clone());

    let guide_sg = graph.stop_grad(guide);
    let a = graph.sub(guided, guide_sg)?;
    let a = graph.sub(a, target)?;
    let g_rows = graph.sq_norm(a);
    let g = graph.mean(g_rows);

    let guided_sg = graph.stop_grad(guided);
    let b = graph.sub(guided_sg, guide)?;
    let b = graph.sub(b, target)?;
    let gc_rows = graph.sq_norm(b);
    let gc_mean = graph.mean(gc_rows);
    let gc = graph.scale(gc_mean, range.gc_weight);

    let total = graph.add(g, gc)?;
    Ok(TcfgTerms { total, g, gc })
}

/// Single-sample trainable-guidance loss closure.
#[derive(Debug, Clone)]
pub struct TcfgLoss {
    pub x_t: Vec<f64>,
    pub y: Label,
    pub t: usize,
    pub eps: Vec<f64>,
    pub omega: f64,
    pub range: TcfgConfig,
}

/// Packages one sample's `L_g + L_gc` as a closure.
pub fn tcfg_losses(
    x_t: &[f64],
    y: Label,
    t: usize,
    eps: &[f64],
    omega: f64,
    range: TcfgConfig,
) -> Result<TcfgLoss> {
    range.validate()?;
    if !range.contains(omega) {
        return Err(Error::Omega(format!(
            "omega {omega} outside the configured range [{}, {}]",
            range.omega_min, range.omega_max
        )));
    }
    if x_t.len() != eps.len() {
        return Err(Error::Dimension { expected: x_t.len(), got: eps.len() });
    }
    Ok(TcfgLoss { x_t: x_t.to_vec(), y, t, eps: eps.to_vec(), omega, range })
}

impl TcfgLoss {
    pub fn build_terms(&self, graph: &mut Graph<'_>) -> Result<TcfgTerms> {
        let d = self.x_t.len();
        let x = Mat::from_vec(1, d, self.x_t.clone());
        let eps = Mat::from_vec(1, d, self.eps.clone());
        build_tcfg(graph, &x, &[self.y], &[self.t], &eps, &[self.omega], &self.range, None)
    }
}

impl LossClosure for TcfgLoss {
    fn build(&self, graph: &mut Graph<'_>) -> Result<Var> {
        Ok(self.build_terms(graph)?.total)
    }
}
