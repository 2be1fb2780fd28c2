//! Per-class tables, delta reports and plots for finished runs and sweeps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cbdm_core::metrics::MetricsReport;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::pipeline::{read_dataset, DATASET_FILE, METRICS_JSON, SAMPLES_FILE, SWEEP_FILE};
use crate::svg;

pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const DELTA_FILE: &str = "delta.csv";
pub const SAMPLES_SVG: &str = "samples.svg";
pub const SWEEP_SVG: &str = "sweep.svg";

/// Per-class metrics joined with training-set class sizes, most frequent first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub train_count: usize,
    pub frechet_raw: f64,
    pub recall_knn: f64,
    pub mode_coverage: f64,
}

fn require(dir: &Path, files: &[&str]) -> anyhow::Result<()> {
    let missing: Vec<&str> = files.iter().copied().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        bail!("{}: missing artifacts: {}", dir.display(), missing.join(", "));
    }
    Ok(())
}

pub fn read_metrics(dir: &Path) -> anyhow::Result<MetricsReport> {
    let path = dir.join(METRICS_JSON);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn class_rows(dir: &Path) -> anyhow::Result<Vec<ClassRow>> {
    require(dir, &[MANIFEST_FILE, METRICS_JSON, DATASET_FILE])?;
    let metrics = read_metrics(dir)?;
    let k = metrics.per_class.len();
    let train = read_dataset(&dir.join(DATASET_FILE), k)?;
    let mut rows: Vec<ClassRow> = metrics
        .per_class
        .iter()
        .map(|c| ClassRow {
            class: c.class,
            train_count: train.class_counts[c.class],
            frechet_raw: c.frechet_raw,
            recall_knn: c.recall_knn,
            mode_coverage: c.mode_coverage,
        })
        .collect();
    rows.sort_by(|a, b| b.train_count.cmp(&a.train_count).then(a.class.cmp(&b.class)));
    Ok(rows)
}

fn write_rows(path: &Path, header: &str, rows: &[ClassRow]) -> anyhow::Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text += &format!("{},{},{},{},{}\n", r.class, r.train_count, r.frechet_raw, r.recall_knn, r.mode_coverage);
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// `this - baseline` per class, in this run's row order.
pub fn delta_rows(this: &[ClassRow], baseline: &[ClassRow]) -> anyhow::Result<Vec<ClassRow>> {
    this.iter()
        .map(|r| {
            let b = baseline
                .iter()
                .find(|b| b.class == r.class)
                .with_context(|| format!("baseline has no class {}", r.class))?;
            Ok(ClassRow {
                class: r.class,
                train_count: r.train_count,
                frechet_raw: r.frechet_raw - b.frechet_raw,
                recall_knn: r.recall_knn - b.recall_knn,
                mode_coverage: r.mode_coverage - b.mode_coverage,
            })
        })
        .collect()
}

/// Writes report files into `dir` and refreshes its manifest.
pub fn emit_report(dir: &Path, baseline: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    require(dir, &[MANIFEST_FILE])?;
    let mut written = Vec::new();
    if dir.join(SWEEP_FILE).exists() {
        written.push(sweep_plot(dir)?);
    } else {
        require(dir, &[METRICS_JSON, DATASET_FILE, SAMPLES_FILE])?;
        let rows = class_rows(dir)?;
        let path = dir.join(PER_CLASS_FILE);
        write_rows(&path, "class,train_count,frechet_raw,recall_knn,mode_coverage", &rows)?;
        written.push(path);

        let k = rows.len();
        let gen = read_dataset(&dir.join(SAMPLES_FILE), k)?;
        let points: Vec<(f64, f64, usize)> = (0..gen.len()).map(|i| (gen.xs.row(i)[0], gen.xs.row(i)[1], gen.labels[i])).collect();
        let path = dir.join(SAMPLES_SVG);
        std::fs::write(&path, svg::scatter("generated samples", &points))?;
        written.push(path);

        if let Some(base) = baseline {
            let delta = delta_rows(&rows, &class_rows(base)?)?;
            let path = dir.join(DELTA_FILE);
            write_rows(&path, "class,train_count,frechet_raw_delta,recall_knn_delta,mode_coverage_delta", &delta)?;
            written.push(path);
        }
    }
    let mut manifest = RunManifest::read(dir)?;
    manifest.collect_artifacts(dir)?;
    manifest.write(dir)?;
    Ok(written)
}

fn sweep_plot(dir: &Path) -> anyhow::Result<PathBuf> {
    let text = std::fs::read_to_string(dir.join(SWEEP_FILE))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty sweep table")?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let axis = rows.first().map(|r| r[0]).unwrap_or("value");
    let xs: Vec<f64> = rows.iter().enumerate().map(|(i, r)| r[1].parse().unwrap_or(i as f64)).collect();
    let series: Vec<(&str, Vec<f64>)> = ["macro_frechet", "macro_recall", "tail_recall", "f_beta", "mean_dist_to_mode"]
        .iter()
        .filter_map(|name| {
            let col = header.iter().position(|h| h == name)?;
            Some((*name, rows.iter().map(|r| r[col].parse().unwrap_or(f64::NAN)).collect()))
        })
        .collect();
    let path = dir.join(SWEEP_SVG);
    std::fs::write(&path, svg::lines(&format!("{axis} sweep"), axis, &xs, &series))?;
    Ok(path)
}
