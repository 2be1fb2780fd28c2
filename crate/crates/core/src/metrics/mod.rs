//! Sample-quality metrics on raw coordinates: Fréchet distance between
//! Gaussian fits, PRD-based F_beta, k-NN recall, ground-truth mode coverage
//! and a downstream linear classifier.

mod classifier;
mod frechet;
mod kmeans;
mod knn;
mod prd;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use classifier::{downstream_eval, fit_softmax, macro_scores, ClassifierConfig, Softmax};
pub use frechet::{frechet_raw, gaussian_fit, COV_REGULARIZER};
pub use kmeans::{kmeans, KMeans};
pub use knn::{knn_radii2, knn_recall, mean_distance_to_mode, mode_coverage};
pub use prd::{cluster_histograms, f_beta, max_fbeta, prd_curve, prd_fbeta, prd_fbeta_pair, HISTOGRAM_SMOOTHING, PRD_ANGLES};

use crate::data::{LongTailDataset, MixtureSpec};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub knn_k: usize,
    /// Defaults to 20 clusters per class when unset.
    pub prd_clusters: Option<usize>,
    pub prd_beta: f64,
    pub coverage_radius_mult: f64,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { knn_k: 5, prd_clusters: None, prd_beta: 8.0, coverage_radius_mult: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub ref_count: usize,
    pub gen_count: usize,
    pub frechet_raw: f64,
    pub recall_knn: f64,
    pub mode_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: u64,
    pub per_class: Vec<ClassMetrics>,
    pub f_beta: f64,
    pub f_inv_beta: f64,
    pub prd_beta: f64,
    pub macro_frechet: f64,
    pub macro_recall: f64,
    pub macro_coverage: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for c in &self.per_class {
            if !c.frechet_raw.is_finite() || !unit(c.recall_knn) || !unit(c.mode_coverage) {
                return Err(Error::NonFinite { context: format!("metrics for class {}", c.class) });
            }
        }
        if !unit(self.f_beta) || !unit(self.f_inv_beta) || !self.macro_frechet.is_finite() {
            return Err(Error::NonFinite { context: "aggregate metrics".into() });
        }
        Ok(())
    }

    /// One row per class followed by a `macro` row.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "class,ref_count,gen_count,frechet_raw,recall_knn,mode_coverage,f_beta,f_inv_beta")?;
        for c in &self.per_class {
            writeln!(
                w,
                "{},{},{},{},{},{},,",
                c.class, c.ref_count, c.gen_count, c.frechet_raw, c.recall_knn, c.mode_coverage
            )?;
        }
        let (nr, ng): (usize, usize) = self.per_class.iter().fold((0, 0), |(a, b), c| (a + c.ref_count, b + c.gen_count));
        writeln!(
            w,
            "macro,{nr},{ng},{},{},{},{},{}",
            self.macro_frechet, self.macro_recall, self.macro_coverage, self.f_beta, self.f_inv_beta
        )?;
        Ok(())
    }
}

/// Scores `gen` against `reference` class by class, plus pooled F_beta.
pub fn evaluate(
    run_id: &str,
    gen: &LongTailDataset,
    reference: &LongTailDataset,
    spec: &MixtureSpec,
    settings: &MetricSettings,
) -> Result<MetricsReport> {
    let k = spec.num_classes();
    if gen.num_classes() != k || reference.num_classes() != k {
        return Err(config_err("class counts of generated, reference and spec differ"));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let g = gen.class_samples(c);
        let r = reference.class_samples(c);
        per_class.push(ClassMetrics {
            class: c,
            ref_count: r.len(),
            gen_count: g.len(),
            frechet_raw: frechet_raw(&g, &r)?,
            recall_knn: knn_recall(&g, &r, settings.knn_k)?,
            mode_coverage: mode_coverage(&g, spec, c, settings.coverage_radius_mult)?,
        });
    }
    let all_gen = gen.xs.to_rows();
    let all_ref = reference.xs.to_rows();
    let clusters = settings.prd_clusters.unwrap_or(20 * k);
    let (f_beta, f_inv_beta) = prd_fbeta_pair(&all_gen, &all_ref, settings.prd_beta, clusters, settings.seed)?;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let report = MetricsReport {
        run_id: run_id.to_string(),
        seed: settings.seed,
        macro_frechet: mean(|c| c.frechet_raw),
        macro_recall: mean(|c| c.recall_knn),
        macro_coverage: mean(|c| c.mode_coverage),
        per_class,
        f_beta,
        f_inv_beta,
        prd_beta: settings.prd_beta,
    };
    report.validate()?;
    Ok(report)
}
