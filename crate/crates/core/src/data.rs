//! Long-tailed datasets drawn from per-class isotropic Gaussian mixtures.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Label;
use crate::error::{config_err, Error, Result};
use crate::tensor::Mat;

/// Mode centers and weights of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModes {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Ground-truth class-conditional laws `q(x0 | y)`: every mode is an
/// isotropic Gaussian with the shared standard deviation `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub data_dim: usize,
    pub sigma: f64,
    pub classes: Vec<ClassModes>,
}

impl MixtureSpec {
    /// One mode per class at angle `2 pi k / K` on a circle.
    pub fn circle(num_classes: usize, radius: f64, sigma: f64) -> Result<Self> {
        let classes = (0..num_classes)
            .map(|k| ClassModes { centers: vec![circle_point(k, num_classes, radius)], weights: vec![1.0] })
            .collect();
        let spec = Self { data_dim: 2, sigma, classes };
        spec.validate()?;
        Ok(spec)
    }

    /// Two equally weighted modes per class, at radii `radius -/+ offset`
    /// along the class angle.
    pub fn two_mode(num_classes: usize, radius: f64, offset: f64, sigma: f64) -> Result<Self> {
        if !(offset > 0.0 && offset < radius) {
            return Err(config_err("two-mode offset must lie in (0, radius)"));
        }
        let classes = (0..num_classes)
            .map(|k| ClassModes {
                centers: vec![
                    circle_point(k, num_classes, radius - offset),
                    circle_point(k, num_classes, radius + offset),
                ],
                weights: vec![0.5, 0.5],
            })
            .collect();
        let spec = Self { data_dim: 2, sigma, classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(config_err("mixture needs at least one class"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(config_err(format!("mode std must be positive, got {}", self.sigma)));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if c.centers.is_empty() || c.centers.len() != c.weights.len() {
                return Err(config_err(format!("class {k}: centers and weights must be nonempty and aligned")));
            }
            if c.centers.iter().any(|m| m.len() != self.data_dim) {
                return Err(config_err(format!("class {k}: center dimension differs from data_dim")));
            }
            let total: f64 = c.weights.iter().sum();
            if c.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(config_err(format!("class {k}: mode weights must be nonnegative and sum to 1")));
            }
        }
        Ok(())
    }

    /// Mean of class `k`'s law.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let c = &self.classes[k];
        let mut m = vec![0.0; self.data_dim];
        for (center, w) in c.centers.iter().zip(&c.weights) {
            for (a, b) in m.iter_mut().zip(center) {
                *a += w * b;
            }
        }
        m
    }

    pub fn sample_class(&self, k: usize, rng: &mut impl Rng) -> Vec<f64> {
        let c = &self.classes[k];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut mode = c.weights.len() - 1;
        for (i, w) in c.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode = i;
                break;
            }
        }
        c.centers[mode]
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `log q(x | y = k)`.
    pub fn log_density_class(&self, x: &[f64], k: usize) -> f64 {
        let c = &self.classes[k];
        let var = self.sigma * self.sigma;
        let norm = -0.5 * self.data_dim as f64 * (2.0 * std::f64::consts::PI * var).ln();
        let terms: Vec<f64> = c
            .centers
            .iter()
            .zip(&c.weights)
            .map(|(m, w)| {
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - d2 / (2.0 * var)
            })
            .collect();
        log_sum_exp(&terms)
    }
}

fn circle_point(k: usize, num_classes: usize, radius: f64) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
    vec![radius * angle.cos(), radius * angle.sin()]
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Conditional density `q(x | y)`, or the prior-weighted marginal when `y` is null.
pub fn true_density(spec: &MixtureSpec, x: &[f64], y: Label, class_prior: &[f64]) -> Result<f64> {
    if x.len() != spec.data_dim {
        return Err(Error::Dimension { expected: spec.data_dim, got: x.len() });
    }
    match y {
        Label::Class(k) if k >= spec.num_classes() => {
            Err(Error::Label { label: k, num_classes: spec.num_classes() })
        }
        Label::Class(k) => Ok(spec.log_density_class(x, k).exp()),
        Label::Null => {
            if class_prior.len() != spec.num_classes() {
                return Err(Error::Dimension { expected: spec.num_classes(), got: class_prior.len() });
            }
            let terms: Vec<f64> = class_prior
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(k, p)| p.ln() + spec.log_density_class(x, k))
                .collect();
            Ok(log_sum_exp(&terms).exp())
        }
    }
}

/// Class sizes `n_k = round(n0 * imb^(k / (K - 1)))`, clamped to at least 1.
pub fn make_longtail_counts(n0: usize, num_classes: usize, imb: f64) -> Result<Vec<usize>> {
    if !(imb > 0.0 && imb <= 1.0) {
        return Err(config_err(format!("imbalance factor must lie in (0, 1], got {imb}")));
    }
    if n0 == 0 || num_classes == 0 {
        return Err(config_err("head count and class count must be >= 1"));
    }
    Ok((0..num_classes)
        .map(|k| {
            let expo = if num_classes == 1 { 0.0 } else { k as f64 / (num_classes - 1) as f64 };
            ((n0 as f64 * imb.powf(expo)).round() as usize).max(1)
        })
        .collect())
}

/// Labelled samples plus the class-size profile they were drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    pub xs: Mat,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub imbalance_factor: f64,
}

impl LongTailDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn data_dim(&self) -> usize {
        self.xs.cols
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    /// Rows belonging to class `k`.
    pub fn class_samples(&self, k: usize) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == k)
            .map(|(i, _)| self.xs.row(i).to_vec())
            .collect()
    }

    /// Builds a dataset from explicit rows; counts are recomputed.
    pub fn from_samples(rows: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension { expected: rows.len(), got: labels.len() });
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::Label { label: y, num_classes });
            }
            counts[y] += 1;
        }
        let xs = if rows.is_empty() { Mat::zeros(0, 0) } else { Mat::from_rows(&rows) };
        let (max, min) = (counts.iter().max().copied(), counts.iter().filter(|c| **c > 0).min().copied());
        let imbalance_factor = match (max, min) {
            (Some(mx), Some(mn)) if mx > 0 => mn as f64 / mx as f64,
            _ => 1.0,
        };
        Ok(Self { xs, labels, class_counts: counts, imbalance_factor })
    }

    /// Concatenation of two datasets with the same class count.
    pub fn concat(&self, other: &LongTailDataset) -> Result<Self> {
        if other.is_empty() {
            return Ok(self.clone());
        }
        let mut rows = self.xs.to_rows();
        rows.extend(other.xs.to_rows());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::from_samples(rows, labels, self.num_classes().max(other.num_classes()))
    }

    /// Writes `x0,x1,...,y` rows with a header line.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.data_dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},y", header.join(","))?;
        for (i, y) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.xs.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", row.join(","), y)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead, num_classes: usize) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| config_err("empty CSV"))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"y") || cols.len() < 2 {
            return Err(config_err("CSV header must be x0,...,y"));
        }
        let d = cols.len() - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(config_err(format!("CSV line {}: expected {} fields", lineno + 2, d + 1)));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| config_err(format!("CSV line {}: {e}", lineno + 2)));
            rows.push(fields[..d].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
            labels.push(
                fields[d]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| config_err(format!("CSV line {}: {e}", lineno + 2)))?,
            );
        }
        let mut ds = Self::from_samples(rows, labels, num_classes)?;
        if ds.is_empty() {
            ds.xs = Mat::zeros(0, d);
        }
        Ok(ds)
    }
}

/// Draws `counts[k]` i.i.d. samples of every class `k`, in class order.
pub fn generate_dataset(spec: &MixtureSpec, counts: &[usize], seed: u64) -> Result<LongTailDataset> {
    spec.validate()?;
    if counts.len() != spec.num_classes() {
        return Err(Error::Dimension { expected: spec.num_classes(), got: counts.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * spec.data_dim);
    let mut labels = Vec::with_capacity(total);
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            data.extend(spec.sample_class(k, &mut rng));
            labels.push(k);
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok(LongTailDataset {
        xs: Mat::from_vec(total, spec.data_dim, data),
        labels,
        class_counts: counts.to_vec(),
        imbalance_factor: if max == 0 { 1.0 } else { min as f64 / max as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longtail_counts_examples() {
        let c = make_longtail_counts(5000, 10, 0.01).unwrap();
        assert_eq!(c[0], 5000);
        assert_eq!(c[9], 50);
        assert_eq!(make_longtail_counts(100, 1, 0.5).unwrap(), vec![100]);
        assert_eq!(make_longtail_counts(100, 2, 1.0).unwrap(), vec![100, 100]);
        assert!(make_longtail_counts(100, 2, 0.0).is_err());
        assert!(make_longtail_counts(100, 2, -0.5).is_err());
        assert!(make_longtail_counts(100, 2, 1.5).is_err());
    }

    #[test]
    fn counts_clamped_to_one() {
        let c = make_longtail_counts(10, 4, 0.001).unwrap();
        assert_eq!(*c.last().unwrap(), 1);
    }

    #[test]
    fn default_benchmark_profile() {
        let c = make_longtail_counts(2000, 8, 0.01).unwrap();
        assert_eq!(c[0], 2000);
        assert_eq!(c[7], 20);
        assert!(c.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn generation_matches_counts_and_seed() {
        let spec = MixtureSpec::circle(4, 2.0, 0.15).unwrap();
        let counts = vec![30, 10, 5, 2];
        let a = generate_dataset(&spec, &counts, 3).unwrap();
        let b = generate_dataset(&spec, &counts, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts, counts);
        for (k, &n) in counts.iter().enumerate() {
            assert_eq!(a.labels.iter().filter(|&&y| y == k).count(), n);
        }
        let c = generate_dataset(&spec, &counts, 4).unwrap();
        assert_ne!(a.xs, c.xs);
        assert!(generate_dataset(&spec, &counts[..3], 3).is_err());
    }

    #[test]
    fn peak_density_of_single_mode() {
        let spec = MixtureSpec::circle(3, 2.0, 0.3).unwrap();
        let center = spec.classes[1].centers[0].clone();
        let d = true_density(&spec, &center, Label::Class(1), &[]).unwrap();
        let expect = 1.0 / (2.0 * std::f64::consts::PI * 0.09);
        assert!((d - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn marginal_symmetry_for_two_classes() {
        // Class centers at (2, 0) and (-2, 0); reflection x -> -x swaps them.
        let spec = MixtureSpec::circle(2, 2.0, 0.4).unwrap();
        for x in [[0.3, 0.1], [1.7, -0.4], [-2.5, 0.9]] {
            let a = true_density(&spec, &x, Label::Null, &[0.5, 0.5]).unwrap();
            let b = true_density(&spec, &[-x[0], x[1]], Label::Null, &[0.5, 0.5]).unwrap();
            assert!((a - b).abs() < 1e-15 * a.max(1.0));
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = MixtureSpec::two_mode(3, 2.0, 0.5, 0.15).unwrap();
        let ds = generate_dataset(&spec, &[5, 3, 1], 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,y\n"));
        let back = LongTailDataset::read_csv(&buf[..], 3).unwrap();
        assert_eq!(back.xs, ds.xs);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MixtureSpec::circle(3, 2.0, 0.0).is_err());
        assert!(MixtureSpec::two_mode(3, 2.0, 2.5, 0.1).is_err());
        let mut spec = MixtureSpec::circle(2, 1.0, 0.1).unwrap();
        spec.classes[0].weights = vec![0.7];
        assert!(spec.validate().is_err());
    }
}
