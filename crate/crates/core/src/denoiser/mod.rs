//! Conditional noise-prediction network `eps(x_t, y, t [, omega])`.
//!
//! A feed-forward network with SiLU activations applied to the
//! concatenation `[x_t | time embedding | class embedding | omega embedding]`.
//! The class-embedding table has `K + 1` rows; the last row is the reserved
//! null (unconditional) label. The omega slot exists only when trainable
//! guidance is enabled; calls without omega feed zeros into it.
//!
//! All parameters live in one flat `Vec<f64>` whose layout is fixed by the
//! config, which makes checkpoints and gradient buffers trivially congruent.

mod checkpoint;
mod gradcheck;
mod graph;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, LossShape};
pub use graph::{backward, Graph, LossClosure, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{acc_gt_h, matmul_a_wt, matmul_g_w, Mat};

/// A class label, or the null label used for unconditional predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(k) => Some(k),
            Label::Null => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub num_classes: usize,
    /// Timestep count `T` of the schedule; sets the embedding frequency range.
    pub num_timesteps: usize,
    pub tcfg_enabled: bool,
    pub omega_embed_dim: usize,
    pub embed_init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dims: vec![128, 128],
            time_embed_dim: 32,
            class_embed_dim: 16,
            num_classes: 8,
            num_timesteps: 200,
            tcfg_enabled: false,
            omega_embed_dim: 8,
            embed_init_std: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("class_embed_dim", self.class_embed_dim),
            ("num_classes", self.num_classes),
            ("num_timesteps", self.num_timesteps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(config_err("hidden_dims must be a nonempty list of positive widths"));
        }
        if self.time_embed_dim < 4 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(config_err("time_embed_dim must be even and >= 4"));
        }
        if self.tcfg_enabled && (self.omega_embed_dim < 4 || !self.omega_embed_dim.is_multiple_of(2)) {
            return Err(config_err("omega_embed_dim must be even and >= 4"));
        }
        if !(self.embed_init_std > 0.0 && self.embed_init_std.is_finite()) {
            return Err(config_err("embed_init_std must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let omega = if self.tcfg_enabled { self.omega_embed_dim } else { 0 };
        self.data_dim + self.time_embed_dim + self.class_embed_dim + omega
    }

    fn omega_offset(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.class_embed_dim
    }

    fn class_offset(&self) -> usize {
        self.data_dim + self.time_embed_dim
    }

    /// Layer widths from input to output, e.g. `[in, 128, 128, d]`.
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.data_dim);
        w
    }

    /// Canonical text used for checkpoint digests.
    pub fn canonical_string(&self) -> String {
        let hidden: Vec<String> = self.hidden_dims.iter().map(|h| h.to_string()).collect();
        format!(
            "data_dim={};hidden_dims={};time_embed_dim={};class_embed_dim={};num_classes={};\
             num_timesteps={};tcfg_enabled={};omega_embed_dim={};embed_init_std={:e}",
            self.data_dim,
            hidden.join(","),
            self.time_embed_dim,
            self.class_embed_dim,
            self.num_classes,
            self.num_timesteps,
            self.tcfg_enabled,
            self.omega_embed_dim,
            self.embed_init_std,
        )
    }
}

/// Name, shape and offset of one parameter array inside the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamArray {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    arrays: Vec<ParamArray>,
    total: usize,
    num_layers: usize,
}

impl Layout {
    fn new(config: &DenoiserConfig) -> Self {
        let mut arrays = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, arrays: &mut Vec<ParamArray>| {
            arrays.push(ParamArray { name, rows, cols, offset });
            offset += rows * cols;
        };
        let widths = config.widths();
        for (l, pair) in widths.windows(2).enumerate() {
            push(format!("layer{l}.weight"), pair[1], pair[0], &mut arrays);
            push(format!("layer{l}.bias"), 1, pair[1], &mut arrays);
        }
        push(
            "class_embedding".into(),
            config.num_classes + 1,
            config.class_embed_dim,
            &mut arrays,
        );
        if config.tcfg_enabled {
            push("omega.weight".into(), config.omega_embed_dim, config.omega_embed_dim, &mut arrays);
            push("omega.bias".into(), 1, config.omega_embed_dim, &mut arrays);
        }
        Self { arrays, total: offset, num_layers: widths.len() - 1 }
    }

    fn weight(&self, l: usize) -> &ParamArray {
        &self.arrays[2 * l]
    }

    fn bias(&self, l: usize) -> &ParamArray {
        &self.arrays[2 * l + 1]
    }

    fn class_embedding(&self) -> &ParamArray {
        &self.arrays[2 * self.num_layers]
    }

    fn omega_weight(&self) -> Option<&ParamArray> {
        self.arrays.get(2 * self.num_layers + 1)
    }

    fn omega_bias(&self) -> Option<&ParamArray> {
        self.arrays.get(2 * self.num_layers + 2)
    }
}

/// Sinusoidal features of a scalar position with geometric angular
/// frequencies from 1 down to `pi / span`.
pub fn sinusoidal_embedding(pos: f64, dim: usize, span: f64, out: &mut [f64]) {
    let half = dim / 2;
    let ratio = (std::f64::consts::PI / span).ln();
    for i in 0..half {
        let freq = (ratio * i as f64 / (half - 1) as f64).exp();
        let (s, c) = (pos * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
}

/// Network weights plus a precomputed time-embedding table.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: Layout,
    values: Vec<f64>,
    time_table: Vec<f64>,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

/// Gradient of a scalar loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    layout: Layout,
    values: Vec<f64>,
}

impl GradientBuffer {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &self.values[a.range()])
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.layout.arrays
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Intermediate activations of one batched forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    input: Mat,
    /// Pre-activations of each hidden layer.
    pre: Vec<Mat>,
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Mat>,
    class_rows: Vec<usize>,
    omega_feats: Option<Mat>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Seeds a deterministic initialization.
pub fn init_denoiser(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total];
    for l in 0..layout.num_layers {
        let fan_in = layout.weight(l).cols as f64;
        let bound = 1.0 / fan_in.sqrt();
        for arr in [layout.weight(l), layout.bias(l)] {
            for v in &mut values[arr.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    let normal = Normal::new(0.0, config.embed_init_std)
        .map_err(|e| config_err(format!("embedding init: {e}")))?;
    for v in &mut values[layout.class_embedding().range()] {
        *v = normal.sample(&mut rng);
    }
    if let (Some(w), Some(b)) = (layout.omega_weight(), layout.omega_bias()) {
        let bound = 1.0 / (w.cols as f64).sqrt();
        for arr in [w, b] {
            for v in &mut values[arr.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    DenoiserParams::from_values(config.clone(), values)
}

impl DenoiserParams {
    pub(crate) fn from_values(config: DenoiserConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Dimension { expected: layout.total, got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("parameter {i}") });
        }
        let te = config.time_embed_dim;
        let span = config.num_timesteps as f64;
        let mut time_table = vec![0.0; config.num_timesteps * te];
        for t in 1..=config.num_timesteps {
            sinusoidal_embedding(t as f64, te, span, &mut time_table[(t - 1) * te..t * te]);
        }
        Ok(Self { config, layout, values, time_table })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers; callers keep entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.layout.arrays
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &self.values[a.range()])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.arrays.iter().find(|a| a.name == name)?.range();
        Some(&mut self.values[range])
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer { layout: self.layout.clone(), values: vec![0.0; self.layout.total] }
    }

    fn slice(&self, arr: &ParamArray) -> &[f64] {
        &self.values[arr.range()]
    }

    fn validate_inputs(
        &self,
        x: &Mat,
        labels: &[Label],
        ts: &[usize],
        omega: Option<&[f64]>,
    ) -> Result<()> {
        let c = &self.config;
        if x.cols != c.data_dim {
            return Err(Error::Dimension { expected: c.data_dim, got: x.cols });
        }
        for len in [labels.len(), ts.len()] {
            if len != x.rows {
                return Err(Error::Dimension { expected: x.rows, got: len });
            }
        }
        for l in labels {
            if let Label::Class(k) = *l {
                if k >= c.num_classes {
                    return Err(Error::Label { label: k, num_classes: c.num_classes });
                }
            }
        }
        for &t in ts {
            if t == 0 || t > c.num_timesteps {
                return Err(Error::Timestep { t, max: c.num_timesteps });
            }
        }
        match omega {
            Some(_) if !c.tcfg_enabled => {
                Err(Error::Omega("omega supplied to a model without an omega embedding".into()))
            }
            Some(w) if w.len() != x.rows => Err(Error::Dimension { expected: x.rows, got: w.len() }),
            Some(w) if w.iter().any(|v| !v.is_finite()) => {
                Err(Error::Omega("non-finite guidance strength".into()))
            }
            _ => Ok(()),
        }
    }

    fn assemble_input(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>)
        -> (Mat, Vec<usize>, Option<Mat>) {
        let c = &self.config;
        let n = x.rows;
        let din = c.input_dim();
        let te = c.time_embed_dim;
        let ce = c.class_embed_dim;
        let emb = self.slice(self.layout.class_embedding());
        let mut input = Mat::zeros(n, din);
        let mut class_rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = input.row_mut(i);
            row[..c.data_dim].copy_from_slice(x.row(i));
            let t = ts[i];
            row[c.data_dim..c.class_offset()].copy_from_slice(&self.time_table[(t - 1) * te..t * te]);
            let k = labels[i].class().unwrap_or(c.num_classes);
            class_rows.push(k);
            row[c.class_offset()..c.class_offset() + ce].copy_from_slice(&emb[k * ce..(k + 1) * ce]);
        }
        let omega_feats = omega.map(|w| {
            let oe = c.omega_embed_dim;
            let mut feats = Mat::zeros(n, oe);
            for (i, &om) in w.iter().enumerate() {
                // omega in [0, 2] spans the same frequency range as t in [0, T].
                let pos = om * c.num_timesteps as f64 / 2.0;
                sinusoidal_embedding(pos, oe, c.num_timesteps as f64, feats.row_mut(i));
            }
            let ow = self.layout.omega_weight().expect("tcfg layout");
            let ob = self.slice(self.layout.omega_bias().expect("tcfg layout"));
            let mut proj = Mat::zeros(n, oe);
            matmul_a_wt(&feats, self.slice(ow), oe, &mut proj);
            let off = c.omega_offset();
            for i in 0..n {
                let dst = &mut input.row_mut(i)[off..off + oe];
                for ((d, p), b) in dst.iter_mut().zip(proj.row(i)).zip(ob) {
                    *d = p + b;
                }
            }
            feats
        });
        (input, class_rows, omega_feats)
    }

    fn run_layers(&self, input: &Mat, mut cache: Option<(&mut Vec<Mat>, &mut Vec<Mat>)>) -> Mat {
        let n = input.rows;
        let mut current: Option<Mat> = None;
        for l in 0..self.layout.num_layers {
            let w = self.layout.weight(l);
            let b = self.slice(self.layout.bias(l));
            let src = current.as_ref().unwrap_or(input);
            let mut z = Mat::zeros(n, w.rows);
            matmul_a_wt(src, self.slice(w), w.rows, &mut z);
            for i in 0..n {
                for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if l + 1 == self.layout.num_layers {
                return z;
            }
            let h = Mat { rows: z.rows, cols: z.cols, data: z.data.iter().map(|&v| silu(v)).collect() };
            if let Some((pre, hidden)) = cache.as_mut() {
                pre.push(z);
                hidden.push(h.clone());
            }
            current = Some(h);
        }
        unreachable!("network has at least one layer")
    }

    /// Batched prediction; row `i` of the result is `eps(x_i, y_i, t_i, omega_i)`.
    pub fn forward(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Mat> {
        self.validate_inputs(x, labels, ts, omega)?;
        let (input, _, _) = self.assemble_input(x, labels, ts, omega);
        Ok(self.run_layers(&input, None))
    }

    pub(crate) fn forward_cached(
        &self,
        x: &Mat,
        labels: &[Label],
        ts: &[usize],
        omega: Option<&[f64]>,
    ) -> Result<(Mat, ForwardCache)> {
        self.validate_inputs(x, labels, ts, omega)?;
        let (input, class_rows, omega_feats) = self.assemble_input(x, labels, ts, omega);
        let mut pre = Vec::new();
        let mut hidden = Vec::new();
        let out = self.run_layers(&input, Some((&mut pre, &mut hidden)));
        Ok((out, ForwardCache { input, pre, hidden, class_rows, omega_feats }))
    }

    /// Accumulates `weight * d(<upstream, out>)/d(theta)` into `grads`.
    pub(crate) fn backward_cached(&self, cache: &ForwardCache, upstream: &Mat, grads: &mut GradientBuffer) {
        let n = upstream.rows;
        let nl = self.layout.num_layers;
        let mut delta = upstream.clone();
        for l in (0..nl).rev() {
            let w = self.layout.weight(l);
            let src = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            acc_gt_h(&delta, src, &mut grads.values[w.range()]);
            let gb = &mut grads.values[self.layout.bias(l).range()];
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            let mut below = Mat::zeros(n, w.cols);
            matmul_g_w(&delta, self.slice(w), w.cols, &mut below);
            if l > 0 {
                for (v, &z) in below.data.iter_mut().zip(&cache.pre[l - 1].data) {
                    *v *= silu_grad(z);
                }
            }
            delta = below;
        }
        // `delta` now holds the gradient with respect to the assembled input.
        let c = &self.config;
        let ce = c.class_embed_dim;
        let emb = self.layout.class_embedding().offset;
        for i in 0..n {
            let k = cache.class_rows[i];
            let src = &delta.row(i)[c.class_offset()..c.class_offset() + ce];
            for (g, d) in grads.values[emb + k * ce..emb + (k + 1) * ce].iter_mut().zip(src) {
                *g += d;
            }
        }
        if let Some(feats) = &cache.omega_feats {
            let oe = c.omega_embed_dim;
            let off = c.omega_offset();
            let mut d_proj = Mat::zeros(n, oe);
            for i in 0..n {
                d_proj.row_mut(i).copy_from_slice(&delta.row(i)[off..off + oe]);
            }
            let ow = self.layout.omega_weight().expect("tcfg layout").range();
            acc_gt_h(&d_proj, feats, &mut grads.values[ow]);
            let ob = self.layout.omega_bias().expect("tcfg layout").range();
            for i in 0..n {
                for (g, d) in grads.values[ob.clone()].iter_mut().zip(d_proj.row(i)) {
                    *g += d;
                }
            }
        }
    }
}

/// Anything that predicts noise with the `eps(x_t, y, t [, omega])` contract.
pub trait EpsModel: Sync {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn supports_omega(&self) -> bool;
    fn predict_batch(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Mat>;

    fn predict_eps(&self, x: &[f64], y: Label, t: usize, omega: Option<f64>) -> Result<Vec<f64>> {
        let xm = Mat::from_vec(1, x.len(), x.to_vec());
        let om = omega.map(|w| [w]);
        let out = self.predict_batch(&xm, &[y], &[t], om.as_ref().map(|w| &w[..]))?;
        Ok(out.data)
    }
}

impl EpsModel for DenoiserParams {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn supports_omega(&self) -> bool {
        self.config.tcfg_enabled
    }

    fn predict_batch(&self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Mat> {
        self.forward(x, labels, ts, omega)
    }
}

/// Single-sample prediction.
pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &[f64],
    y: Label,
    t: usize,
    omega: Option<f64>,
) -> Result<Vec<f64>> {
    params.predict_eps(x_t, y, t, omega)
}
