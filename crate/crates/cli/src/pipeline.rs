//! Train, sample and evaluate pipelines over a run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use cbdm_core::data::{generate_dataset, LongTailDataset, MixtureSpec};
use cbdm_core::denoiser::{DenoiserParams, Label};
use cbdm_core::metrics::{downstream_eval, evaluate, mean_distance_to_mode, MetricsReport};
use cbdm_core::oracle::{verify_prop1, verify_prop2_bound, write_oracle_csv, GaussianCase, Grid, OracleRow};
use cbdm_core::sampler::{sample_dataset, SampleRequest};
use cbdm_core::schedule::DiffusionSchedule;
use cbdm_core::trainer::{train_from, TrainOutput};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub const DATASET_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EMA_CHECKPOINT_FILE: &str = "checkpoint_ema.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const DOWNSTREAM_FILE: &str = "downstream.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Omega,
    Tau,
    Phi,
    Labelset,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Omega => "omega",
            Self::Tau => "tau",
            Self::Phi => "phi",
            Self::Labelset => "labelset",
        }
    }
}

/// Datasets derived from the config: training set, metric reference and
/// balanced classifier test set, each from its own seed.
pub struct Datasets {
    pub spec: MixtureSpec,
    pub train: LongTailDataset,
    pub reference: LongTailDataset,
    pub test: LongTailDataset,
}

pub fn datasets(config: &ExperimentConfig) -> anyhow::Result<Datasets> {
    let d = &config.data;
    let spec = d.spec()?;
    let k = d.num_classes;
    Ok(Datasets {
        train: generate_dataset(&spec, &d.counts()?, d.seed)?,
        reference: generate_dataset(&spec, &vec![d.reference_per_class; k], d.seed.wrapping_add(1))?,
        test: generate_dataset(&spec, &vec![d.test_per_class; k], d.seed.wrapping_add(2))?,
        spec,
    })
}

fn seeds(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".to_string(), config.data.seed),
        ("train".to_string(), config.train.seed),
        ("init".to_string(), config.train.init_seed),
        ("sample".to_string(), config.sample.seed),
        ("metrics".to_string(), config.metrics.seed),
        ("classifier".to_string(), config.classifier.seed),
    ])
}

/// Runs `body` in `dir` and leaves a manifest marked succeeded or failed.
pub fn with_manifest(
    config: &ExperimentConfig,
    dir: &Path,
    verb: &str,
    body: impl FnOnce() -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
    let mut manifest = RunManifest::start(&config.run_id, verb, config.digest()?, seeds(config));
    manifest.write(dir)?;
    let result = body();
    manifest.finish(dir, &result)?;
    result
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cbdm_core::Result<()>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, num_classes: usize) -> anyhow::Result<LongTailDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(LongTailDataset::read_csv(BufReader::new(file), num_classes)?)
}

/// Trains from a fresh initialization and writes the dataset, log and checkpoints.
pub fn train_stage(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<TrainOutput> {
    let data = datasets(config)?;
    let schedule = config.schedule.build()?;
    write_file(&dir.join(DATASET_FILE), |w| data.train.write_csv(w))?;
    let init = cbdm_core::denoiser::init_denoiser(&config.model, config.train.init_seed)?;
    let out = train_from(&config.train, &data.train, &schedule, init, Some(dir))?;
    write_file(&dir.join(TRAIN_LOG_FILE), |w| out.log.write_csv(w))?;
    out.params.save(dir.join(CHECKPOINT_FILE))?;
    if let Some(ema) = &out.ema {
        ema.save(dir.join(EMA_CHECKPOINT_FILE))?;
    }
    Ok(out)
}

pub fn load_params(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<DenoiserParams> {
    let file = if config.sample.use_ema { EMA_CHECKPOINT_FILE } else { CHECKPOINT_FILE };
    let path = dir.join(file);
    DenoiserParams::load(&config.model, &path).with_context(|| format!("loading {}", path.display()))
}

pub fn sample_request(config: &ExperimentConfig) -> SampleRequest {
    let s = &config.sample;
    SampleRequest {
        label: Label::Null,
        omega: s.omega,
        num_samples: 0,
        method: s.method,
        ddim_steps: s.ddim_steps,
        seed: s.seed,
        use_tcfg: s.use_tcfg,
    }
}

/// Draws `sample.per_class` points for every class.
pub fn generate(config: &ExperimentConfig, params: &DenoiserParams, schedule: &DiffusionSchedule) -> anyhow::Result<LongTailDataset> {
    let counts = vec![config.sample.per_class; config.data.num_classes];
    Ok(sample_dataset(params, schedule, &sample_request(config), &counts)?)
}

pub fn sample_stage(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<LongTailDataset> {
    let params = load_params(config, dir)?;
    let gen = generate(config, &params, &config.schedule.build()?)?;
    write_file(&dir.join(SAMPLES_FILE), |w| gen.write_csv(w))?;
    Ok(gen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Downstream {
    pub real_precision: f64,
    pub real_recall: f64,
    pub augmented_precision: f64,
    pub augmented_recall: f64,
}

pub fn eval_stage(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<MetricsReport> {
    let data = datasets(config)?;
    let gen = read_dataset(&dir.join(SAMPLES_FILE), config.data.num_classes)?;
    let report = evaluate(&config.run_id, &gen, &data.reference, &data.spec, &config.metrics)?;
    write_file(&dir.join(METRICS_CSV), |w| report.write_csv(w))?;
    std::fs::write(dir.join(METRICS_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    let (real_precision, real_recall) = downstream_eval(&data.train, None, &data.test, &config.classifier)?;
    let (augmented_precision, augmented_recall) = downstream_eval(&data.train, Some(&gen), &data.test, &config.classifier)?;
    let down = Downstream { real_precision, real_recall, augmented_precision, augmented_recall };
    std::fs::write(dir.join(DOWNSTREAM_FILE), serde_json::to_string_pretty(&down)? + "\n")?;
    Ok(report)
}

/// Full train, sample and evaluate pipeline in `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<MetricsReport> {
    let mut report = None;
    with_manifest(config, dir, "run", || {
        train_stage(config, dir)?;
        sample_stage(config, dir)?;
        report = Some(eval_stage(config, dir)?);
        Ok(())
    })?;
    Ok(report.expect("set on success"))
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub macro_frechet: f64,
    pub macro_recall: f64,
    pub macro_coverage: f64,
    pub f_beta: f64,
    pub f_inv_beta: f64,
    pub tail_frechet: f64,
    pub tail_recall: f64,
    pub mean_dist_to_mode: f64,
}

impl SweepRow {
    pub fn new(value: String, report: &MetricsReport, gen: &LongTailDataset, spec: &MixtureSpec) -> anyhow::Result<Self> {
        let k = report.per_class.len();
        let tail = &report.per_class[k / 2..];
        let n = tail.len() as f64;
        let mut dist = 0.0;
        for c in 0..k {
            dist += mean_distance_to_mode(&gen.class_samples(c), spec, c)?;
        }
        Ok(Self {
            value,
            macro_frechet: report.macro_frechet,
            macro_recall: report.macro_recall,
            macro_coverage: report.macro_coverage,
            f_beta: report.f_beta,
            f_inv_beta: report.f_inv_beta,
            tail_frechet: tail.iter().map(|c| c.frechet_raw).sum::<f64>() / n,
            tail_recall: tail.iter().map(|c| c.recall_knn).sum::<f64>() / n,
            mean_dist_to_mode: dist / k as f64,
        })
    }
}

pub fn write_sweep_csv(axis: SweepAxis, rows: &[SweepRow], path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "axis,value,macro_frechet,macro_recall,macro_coverage,f_beta,f_inv_beta,tail_frechet,tail_recall,mean_dist_to_mode"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            axis.name(),
            r.value,
            r.macro_frechet,
            r.macro_recall,
            r.macro_coverage,
            r.f_beta,
            r.f_inv_beta,
            r.tail_frechet,
            r.tail_recall,
            r.mean_dist_to_mode
        )?;
    }
    w.flush()?;
    Ok(())
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// Sub-run configs for a training-side axis.
fn sweep_configs(config: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    let mut push = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = config.clone();
        f(&mut c);
        c.run_id = format!("{}_{}_{}", config.run_id, axis.name(), label);
        out.push((label, c));
    };
    match axis {
        SweepAxis::Omega => {}
        SweepAxis::Tau => {
            for &t in &config.sweep.tau {
                push(value_label(t), &|c| c.train.tau = t);
            }
        }
        SweepAxis::Phi => {
            for &p in &config.sweep.phi {
                push(value_label(p), &|c| c.train.cond_dropout_phi = p);
            }
        }
        SweepAxis::Labelset => {
            for &m in &config.sweep.labelset {
                push(m.name().to_string(), &|c| c.train.label_set_mode = m);
            }
        }
    }
    out
}

/// Runs one sub-run per grid value and writes the consolidated table.
///
/// The omega axis trains once and samples per value, since guidance
/// strength only enters at sampling time.
pub fn run_sweep(config: &ExperimentConfig, dir: &Path, axis: SweepAxis) -> anyhow::Result<Vec<SweepRow>> {
    let grid_len = match axis {
        SweepAxis::Omega => config.sweep.omega.len(),
        SweepAxis::Tau => config.sweep.tau.len(),
        SweepAxis::Phi => config.sweep.phi.len(),
        SweepAxis::Labelset => config.sweep.labelset.len(),
    };
    if grid_len == 0 {
        anyhow::bail!("sweep.{}: grid is empty", axis.name());
    }
    let mut rows = Vec::new();
    with_manifest(config, dir, &format!("sweep:{}", axis.name()), || {
        let data = datasets(config)?;
        match axis {
            SweepAxis::Omega => {
                let model_dir = dir.join("model");
                std::fs::create_dir_all(&model_dir)?;
                let out = train_stage(config, &model_dir)?;
                let params = if config.sample.use_ema { out.ema.expect("validated") } else { out.params };
                let schedule = config.schedule.build()?;
                for &w in &config.sweep.omega {
                    let mut c = config.clone();
                    c.sample.omega = w;
                    let sub = dir.join(format!("omega_{}", value_label(w)));
                    std::fs::create_dir_all(&sub)?;
                    let gen = generate(&c, &params, &schedule)?;
                    write_file(&sub.join(SAMPLES_FILE), |f| gen.write_csv(f))?;
                    let report = evaluate(&c.run_id, &gen, &data.reference, &data.spec, &c.metrics)?;
                    write_file(&sub.join(METRICS_CSV), |f| report.write_csv(f))?;
                    rows.push(SweepRow::new(value_label(w), &report, &gen, &data.spec)?);
                }
            }
            _ => {
                for (label, c) in sweep_configs(config, axis) {
                    let sub = dir.join(format!("{}_{label}", axis.name()));
                    let report = run_experiment(&c, &sub)?;
                    let gen = read_dataset(&sub.join(SAMPLES_FILE), c.data.num_classes)?;
                    rows.push(SweepRow::new(label, &report, &gen, &data.spec)?);
                }
            }
        }
        write_sweep_csv(axis, &rows, &dir.join(SWEEP_FILE))
    })?;
    Ok(rows)
}

/// Evaluates the identity and bound checks for every configured case.
pub fn run_oracle(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    with_manifest(config, dir, "oracle", || {
        let o = &config.oracle;
        let schedule = config.schedule.build()?;
        let grid = Grid { lo: o.grid_lo, hi: o.grid_hi, points: o.grid_points };
        for case_cfg in &o.cases {
            let mut case = GaussianCase::new(case_cfg.means.clone(), case_cfg.s, case_cfg.prior.clone(), schedule.clone())
                .with_context(|| format!("oracle case {}", case_cfg.id))?;
            case.grid = grid;
            case.validate().with_context(|| format!("oracle case {}", case_cfg.id))?;
            for &t in &o.timesteps {
                let started = Instant::now();
                let residual = verify_prop1(&case, t, &grid, o.x_t_stride)?;
                let bound = if t >= 2 { Some(verify_prop2_bound(&case, t, o.mc_samples, o.seed, o.tau)?) } else { None };
                rows.push(OracleRow {
                    case_id: case_cfg.id.clone(),
                    t,
                    residual: Some(residual),
                    lhs: bound.map(|b| b.lhs),
                    rhs: bound.map(|b| b.rhs),
                    stderr: bound.map(|b| b.stderr),
                });
                eprintln!("oracle {} t={t}: {:.1}s", case_cfg.id, started.elapsed().as_secs_f64());
            }
        }
        write_file(&dir.join(ORACLE_FILE), |w| write_oracle_csv(&rows, w))
    })?;
    Ok(rows)
}

/// Default run directory for a config.
pub fn default_out(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(&config.run_id)
}
