use std::f64::consts::FRAC_PI_2;

use super::kmeans::kmeans;
use crate::error::{config_err, Result};

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_RESTARTS: usize = 3;
/// Odd, so the angle grid contains pi/4 and is symmetric about it.
pub const PRD_ANGLES: usize = 1001;
pub const HISTOGRAM_SMOOTHING: f64 = 1e-10;

/// Precision and recall pairs along the PRD curve for cluster histograms of
/// the generated (`q`) and reference (`p`) sets.
pub fn prd_curve(q: &[f64], p: &[f64]) -> Vec<(f64, f64)> {
    (0..PRD_ANGLES)
        .map(|i| {
            let theta = (i + 1) as f64 / (PRD_ANGLES + 1) as f64 * FRAC_PI_2;
            let lambda = theta.tan();
            let precision: f64 = p.iter().zip(q).map(|(pi, qi)| (lambda * pi).min(*qi)).sum();
            let recall: f64 = p.iter().zip(q).map(|(pi, qi)| pi.min(qi / lambda)).sum();
            (precision.clamp(0.0, 1.0), recall.clamp(0.0, 1.0))
        })
        .collect()
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Cluster histograms of `gen` and `reference` from k-means on the pooled set.
///
/// The pool is sorted before clustering so the partition does not depend on
/// which side a point came from.
pub fn cluster_histograms(gen: &[Vec<f64>], reference: &[Vec<f64>], num_clusters: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if num_clusters < 2 || gen.is_empty() || reference.is_empty() {
        return Err(config_err("PRD needs num_clusters >= 2 and nonempty sets"));
    }
    let mut pool: Vec<Vec<f64>> = gen.iter().chain(reference).cloned().collect();
    pool.sort_by(|a, b| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let model = kmeans(&pool, num_clusters, KMEANS_MAX_ITER, KMEANS_RESTARTS, seed)?;
    let hist = |xs: &[Vec<f64>]| {
        let mut h = vec![0.0; num_clusters];
        for x in xs {
            h[model.nearest(x)] += 1.0;
        }
        let total = xs.len() as f64 + HISTOGRAM_SMOOTHING * num_clusters as f64;
        h.iter().map(|c| (c + HISTOGRAM_SMOOTHING) / total).collect::<Vec<f64>>()
    };
    Ok((hist(gen), hist(reference)))
}

/// Maximum F_beta along the PRD curve.
pub fn prd_fbeta(gen: &[Vec<f64>], reference: &[Vec<f64>], beta: f64, num_clusters: usize, seed: u64) -> Result<f64> {
    let (q, p) = cluster_histograms(gen, reference, num_clusters, seed)?;
    Ok(max_fbeta(&prd_curve(&q, &p), beta))
}

pub fn max_fbeta(curve: &[(f64, f64)], beta: f64) -> f64 {
    curve.iter().map(|(p, r)| f_beta(*p, *r, beta)).fold(0.0, f64::max)
}

/// `(F_beta, F_{1/beta})` from one clustering.
pub fn prd_fbeta_pair(gen: &[Vec<f64>], reference: &[Vec<f64>], beta: f64, num_clusters: usize, seed: u64) -> Result<(f64, f64)> {
    let (q, p) = cluster_histograms(gen, reference, num_clusters, seed)?;
    let curve = prd_curve(&q, &p);
    Ok((max_fbeta(&curve, beta), max_fbeta(&curve, 1.0 / beta)))
}
