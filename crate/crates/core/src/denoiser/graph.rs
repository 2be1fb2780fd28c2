//! Reverse-mode differentiation over compositions of network evaluations.
//!
//! Nodes are batched matrices. Network calls record their activations so the
//! backward pass can push adjoints through the network weights; every other
//! node is a cheap elementwise or reduction op. A stop-gradient node passes
//! its value through unchanged and drops its adjoint.

use super::{DenoiserParams, ForwardCache, GradientBuffer, Label};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Net(Box<ForwardCache>),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    RowScale(usize, Vec<f64>),
    StopGrad,
    SqNorm(usize),
    Mean(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// A tape of operations bound to one parameter set.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p DenoiserParams,
    nodes: Vec<Node>,
    net_calls: usize,
    /// Replay values for stop-gradient nodes, consumed in recording order.
    frozen: Option<Vec<Mat>>,
    stop_grads: usize,
}

/// A scalar loss built from graph operations.
pub trait LossClosure {
    fn build(&self, graph: &mut Graph<'_>) -> Result<Var>;
}

impl<F> LossClosure for F
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    fn build(&self, graph: &mut Graph<'_>) -> Result<Var> {
        self(graph)
    }
}

/// Evaluates `loss` and its exact gradient with respect to `params`.
pub fn backward(params: &DenoiserParams, loss: &impl LossClosure) -> Result<(f64, GradientBuffer)> {
    let mut graph = Graph::new(params);
    let out = loss.build(&mut graph)?;
    graph.backward(out)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p DenoiserParams) -> Self {
        Self { params, nodes: Vec::new(), net_calls: 0, frozen: None, stop_grads: 0 }
    }

    /// A graph whose stop-gradient nodes output `frozen[i]` (in recording
    /// order) instead of their argument. Finite-difference checks use this to
    /// hold stopped branches at their base values while parameters move.
    pub fn with_frozen(params: &'p DenoiserParams, frozen: Vec<Mat>) -> Self {
        Self { frozen: Some(frozen), ..Self::new(params) }
    }

    /// Values of all stop-gradient nodes, in recording order.
    pub fn stop_grad_values(&self) -> Vec<Mat> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn params(&self) -> &'p DenoiserParams {
        self.params
    }

    /// Number of network evaluations recorded so far.
    pub fn net_calls(&self) -> usize {
        self.net_calls
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!((m.rows, m.cols), (1, 1));
        m.data[0]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a batched network evaluation `eps(x_i, y_i, t_i [, omega_i])`.
    pub fn eps(&mut self, x: &Mat, labels: &[Label], ts: &[usize], omega: Option<&[f64]>) -> Result<Var> {
        let (out, cache) = self.params.forward_cached(x, labels, ts, omega)?;
        self.net_calls += 1;
        Ok(self.push(out, Op::Net(Box::new(cache))))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape(y) {
            Ok(())
        } else {
            Err(Error::Dimension { expected: x.data.len(), got: y.data.len() })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign_scaled(self.value(b), 1.0);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign_scaled(self.value(b), -1.0);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let v = Mat { rows: src.rows, cols: src.cols, data: src.data.iter().map(|x| c * x).collect() };
        self.push(v, Op::Scale(a.0, c))
    }

    /// Multiplies row `i` by `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if weights.len() != src.rows {
            return Err(Error::Dimension { expected: src.rows, got: weights.len() });
        }
        let mut v = src.clone();
        for (i, w) in weights.iter().enumerate() {
            v.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
        Ok(self.push(v, Op::RowScale(a.0, weights)))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let replay = self.frozen.as_ref().and_then(|f| f.get(self.stop_grads)).cloned();
        self.stop_grads += 1;
        let v = match replay {
            Some(v) if v.same_shape(self.value(a)) => v,
            _ => self.value(a).clone(),
        };
        self.push(v, Op::StopGrad)
    }

    /// Row-wise squared Euclidean norm, giving an `n x 1` column.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows).map(|i| src.row(i).iter().map(|x| x * x).sum()).collect();
        let v = Mat::from_vec(src.rows, 1, data);
        self.push(v, Op::SqNorm(a.0))
    }

    /// Column-wise mean over rows, giving a `1 x cols` row.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = column_sums(src, 1.0 / src.rows.max(1) as f64);
        self.push(v, Op::Mean(a.0))
    }

    /// Column-wise sum over rows, giving a `1 x cols` row.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = column_sums(self.value(a), 1.0);
        self.push(v, Op::Sum(a.0))
    }

    /// Gradient of the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<(f64, GradientBuffer)> {
        let mut grads = self.params.zero_grads();
        let value = self.backward_into(loss, 1.0, &mut grads)?;
        Ok((value, grads))
    }

    /// Adds `weight * d(loss)/d(theta)` into `grads` and returns the loss.
    pub fn backward_into(&self, loss: Var, weight: f64, grads: &mut GradientBuffer) -> Result<f64> {
        let out = self.value(loss);
        if (out.rows, out.cols) != (1, 1) {
            return Err(Error::Dimension { expected: 1, got: out.data.len() });
        }
        let value = out.data[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("loss value {value}") });
        }
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Mat::from_vec(1, 1, vec![weight]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGrad => {}
                Op::Net(cache) => self.params.backward_cached(cache, &g, grads),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g, 1.0);
                    accumulate(&mut adj, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g, 1.0);
                    accumulate(&mut adj, *b, &g, -1.0);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, &g, *c),
                Op::RowScale(a, w) => {
                    let mut d = g;
                    for (r, wr) in w.iter().enumerate() {
                        d.row_mut(r).iter_mut().for_each(|x| *x *= wr);
                    }
                    accumulate(&mut adj, *a, &d, 1.0);
                }
                Op::SqNorm(a) => {
                    let src = &self.nodes[*a].value;
                    let mut d = src.clone();
                    for r in 0..src.rows {
                        let s = 2.0 * g.data[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut adj, *a, &d, 1.0);
                }
                Op::Mean(a) | Op::Sum(a) => {
                    let src = &self.nodes[*a].value;
                    let scale = match &self.nodes[i].op {
                        Op::Mean(_) => 1.0 / src.rows.max(1) as f64,
                        _ => 1.0,
                    };
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        d.row_mut(r).iter_mut().zip(&g.data).for_each(|(x, gv)| *x = scale * gv);
                    }
                    accumulate(&mut adj, *a, &d, 1.0);
                }
            }
        }
        Ok(value)
    }
}

fn column_sums(src: &Mat, scale: f64) -> Mat {
    let mut out = vec![0.0; src.cols];
    for r in 0..src.rows {
        for (o, x) in out.iter_mut().zip(src.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    Mat::from_vec(1, src.cols, out)
}

fn accumulate(adj: &mut [Option<Mat>], idx: usize, g: &Mat, scale: f64) {
    match &mut adj[idx] {
        Some(existing) => existing.add_assign_scaled(g, scale),
        slot @ None => {
            let mut m = g.clone();
            if scale != 1.0 {
                m.data.iter_mut().for_each(|x| *x *= scale);
            }
            *slot = Some(m);
        }
    }
}
