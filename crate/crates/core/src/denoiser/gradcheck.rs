//! Finite-difference verification of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DenoiserParams, Graph, Label};
use crate::error::{Error, Result};
use crate::loss::{build_cbdm, build_ddpm, build_tcfg, CbdmBatch, CbdmWeights, TcfgConfig};
use crate::tensor::Mat;

/// Loss family exercised by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossShape {
    Ddpm,
    Cbdm { tau: f64, gamma: f64 },
    /// `L_g + L_gc`; needs a model with an omega embedding.
    Tcfg,
}

struct Probe {
    x: Mat,
    labels: Vec<Label>,
    ts: Vec<usize>,
    eps: Mat,
    sets: Vec<Vec<usize>>,
    omegas: Vec<f64>,
}

fn random_probe(params: &DenoiserParams, rng: &mut ChaCha8Rng) -> Probe {
    let c = params.config();
    let n = 4;
    let d = c.data_dim;
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let x = Mat::from_vec(n, d, (0..n * d).map(|_| 1.5 * normal()).collect());
    let eps = Mat::from_vec(n, d, (0..n * d).map(|_| normal()).collect());
    let labels = (0..n)
        .map(|i| if i == n - 1 { Label::Null } else { Label::Class(rng.random_range(0..c.num_classes)) })
        .collect();
    let ts = (0..n).map(|_| rng.random_range(1..=c.num_timesteps)).collect();
    let sets = (0..n)
        .map(|_| (0..2).map(|_| rng.random_range(0..c.num_classes)).collect())
        .collect();
    let omegas = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    Probe { x, labels, ts, eps, sets, omegas }
}

fn record(graph: &mut Graph<'_>, shape: LossShape, p: &Probe) -> Result<super::Var> {
    match shape {
        LossShape::Ddpm => Ok(build_ddpm(graph, &p.x, &p.labels, &p.ts, &p.eps)?.0),
        LossShape::Cbdm { tau, gamma } => Ok(build_cbdm(
            graph,
            CbdmBatch {
                x_t: &p.x,
                labels: &p.labels,
                ts: &p.ts,
                eps: &p.eps,
                label_sets: &p.sets,
                weights: CbdmWeights { tau, gamma, set_size: 2 },
            },
        )?
        .total),
        LossShape::Tcfg => Ok(build_tcfg(
            graph,
            &p.x,
            &p.labels,
            &p.ts,
            &p.eps,
            &p.omegas,
            &TcfgConfig::default(),
            None,
        )?
        .total),
    }
}

/// Worst relative error between reverse-mode and central finite-difference
/// derivatives over `num_probes` randomly chosen parameters.
///
/// Stop-gradient branches are held at their base values during the
/// perturbed evaluations, so the finite differences measure the same
/// surrogate the backward pass differentiates.
/// The relative error is `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn grad_check(
    params: &DenoiserParams,
    shape: LossShape,
    num_probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    if num_probes == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random_probe(params, &mut rng);

    let mut graph = Graph::new(params);
    let out = record(&mut graph, shape, &probe)?;
    let (_, grads) = graph.backward(out)?;
    let frozen = graph.stop_grad_values();

    let eval = |p: &DenoiserParams| -> Result<f64> {
        let mut g = Graph::with_frozen(p, frozen.clone());
        let v = record(&mut g, shape, &probe)?;
        Ok(g.scalar(v))
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for _ in 0..num_probes {
        let idx = rng.random_range(0..params.parameter_count());
        let orig = work.values()[idx];
        work.values_mut()[idx] = orig + step;
        let plus = eval(&work)?;
        work.values_mut()[idx] = orig - step;
        let minus = eval(&work)?;
        work.values_mut()[idx] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let an = grads.values()[idx];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
