use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LongTailDataset;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.5, l2: 1e-4, seed: 0 }
    }
}

/// Multinomial logistic regression with an intercept.
#[derive(Debug, Clone)]
pub struct Softmax {
    /// `num_classes x (dim + 1)`, intercept last.
    weights: Vec<Vec<f64>>,
}

impl Softmax {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b })
    }
}

/// Full-batch gradient descent on the mean cross-entropy.
pub fn fit_softmax(data: &LongTailDataset, config: &ClassifierConfig) -> Result<Softmax> {
    if data.is_empty() {
        return Err(config_err("classifier training set is empty"));
    }
    let k = data.num_classes();
    let d = data.data_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut model = Softmax { weights: (0..k).map(|_| (0..=d).map(|_| init.sample(&mut rng)).collect()).collect() };
    let n = data.len() as f64;
    for _ in 0..config.iterations {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for i in 0..data.len() {
            let x = data.xs.row(i);
            let z = model.logits(x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let r = e[c] / s - if data.labels[i] == c { 1.0 } else { 0.0 };
                for (g, xv) in grad[c][..d].iter_mut().zip(x) {
                    *g += r * xv;
                }
                grad[c][d] += r;
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            for j in 0..=d {
                let reg = if j < d { config.l2 * w[j] } else { 0.0 };
                w[j] -= config.lr * (g[j] / n + reg);
            }
        }
    }
    Ok(model)
}

/// Macro precision and recall; classes never predicted score 0 precision.
pub fn macro_scores(model: &Softmax, test: &LongTailDataset) -> (f64, f64) {
    let k = test.num_classes();
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for i in 0..test.len() {
        let p = model.predict(test.xs.row(i));
        let y = test.labels[i];
        predicted[p] += 1;
        actual[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = (0..k).map(|c| ratio(tp[c], predicted[c])).sum::<f64>() / k as f64;
    let recall = (0..k).map(|c| ratio(tp[c], actual[c])).sum::<f64>() / k as f64;
    (precision, recall)
}

/// Trains on `real_lt` plus optional generated data and scores on `test`.
pub fn downstream_eval(
    real_lt: &LongTailDataset,
    gen: Option<&LongTailDataset>,
    test: &LongTailDataset,
    config: &ClassifierConfig,
) -> Result<(f64, f64)> {
    let counts = &test.class_counts;
    if counts.iter().any(|c| *c != counts[0]) {
        return Err(config_err("downstream test set must be class-balanced"));
    }
    let train = match gen {
        Some(g) if !g.is_empty() => real_lt.concat(g)?,
        _ => real_lt.clone(),
    };
    let model = fit_softmax(&train, config)?;
    Ok(macro_scores(&model, test))
}
