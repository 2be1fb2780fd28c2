use cbdm_core::data::{generate_dataset, make_longtail_counts, LongTailDataset, MixtureSpec};
use cbdm_core::denoiser::{init_denoiser, DenoiserConfig};
use cbdm_core::loss::{LabelSampler, LabelSetMode, TcfgConfig};
use cbdm_core::schedule::{build_schedule, DiffusionSchedule};
use cbdm_core::trainer::*;
use cbdm_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (LongTailDataset, DiffusionSchedule, DenoiserConfig) {
    let spec = MixtureSpec::circle(8, 2.0, 0.15).unwrap();
    let ds = generate_dataset(&spec, &make_longtail_counts(300, 8, 0.01).unwrap(), 0).unwrap();
    let cfg = DenoiserConfig { hidden_dims: vec![32, 32], ..DenoiserConfig::default() };
    (ds, build_schedule(200, 1e-4, 0.02).unwrap(), cfg)
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 32, lr: 1e-3, warmup_steps: 10, seed: 3, init_seed: 1, ..TrainConfig::default() }
}

#[test]
fn zero_tau_matches_plain_ddpm_bitwise() {
    let (ds, s, dc) = setup();
    let cbdm = TrainConfig { tau: 0.0, objective: Objective::Cbdm, ..quick(1000) };
    let ddpm = TrainConfig { objective: Objective::Ddpm, ..cbdm.clone() };
    let a = train(&cbdm, &ds, &s, &dc).unwrap();
    let b = train(&ddpm, &ds, &s, &dc).unwrap();
    assert_eq!(a.params.to_checkpoint_bytes(), b.params.to_checkpoint_bytes());
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let (ds, s, dc) = setup();
    let a = train(&quick(30), &ds, &s, &dc).unwrap();
    let b = train(&quick(30), &ds, &s, &dc).unwrap();
    assert_eq!(a.params.values(), b.params.values());
    assert_eq!(a.log.records.iter().map(|r| r.loss_total).collect::<Vec<_>>(), b.log.records.iter().map(|r| r.loss_total).collect::<Vec<_>>());
    let c = train(&TrainConfig { seed: 4, ..quick(30) }, &ds, &s, &dc).unwrap();
    assert_ne!(a.params.values(), c.params.values());
}

#[test]
fn denoising_loss_decreases() {
    let (ds, s, dc) = setup();
    let out = train(&quick(600), &ds, &s, &dc).unwrap();
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss_dm).sum::<f64>() / r.len() as f64;
    let early = mean(&out.log.records[..50]);
    let late = mean(&out.log.records[550..]);
    assert!(late < 0.8 * early, "{early} -> {late}");
    assert!(out.log.records.iter().all(|r| r.loss_total.is_finite() && r.grad_norm.is_finite()));
}

#[test]
fn regularizer_terms_are_logged() {
    let (ds, s, dc) = setup();
    let out = train(&quick(5), &ds, &s, &dc).unwrap();
    for r in &out.log.records {
        assert!(r.loss_r > 0.0 && r.loss_rc > 0.0);
        assert!(r.loss_g.is_none());
    }
    let ddpm = train(&TrainConfig { objective: Objective::Ddpm, ..quick(5) }, &ds, &s, &dc).unwrap();
    assert!(ddpm.log.records.iter().all(|r| r.loss_r == 0.0 && r.loss_total == r.loss_dm));
}

#[test]
fn dropout_rate_matches_phi() {
    let (ds, s, _) = setup();
    let sampler = LabelSampler::new(LabelSetMode::Train, &ds.class_counts).unwrap();
    let cfg = TrainConfig { batch_size: 1000, cond_dropout_phi: 0.1, ..quick(1) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dropped = 0;
    for _ in 0..20 {
        let b = draw_batch(&mut rng, &cfg, ds.len(), 2, s.num_steps(), &sampler);
        dropped += b.dropped.iter().filter(|d| **d).count();
        assert!(b.ts.iter().all(|t| (1..=200).contains(t)));
    }
    let rate = dropped as f64 / 20_000.0;
    // 3 binomial standard errors.
    assert!((rate - 0.1).abs() < 3.0 * (0.09f64 / 20_000.0).sqrt(), "{rate}");
}

#[test]
fn zero_phi_never_drops() {
    let (ds, s, _) = setup();
    let sampler = LabelSampler::new(LabelSetMode::Train, &ds.class_counts).unwrap();
    let cfg = TrainConfig { batch_size: 500, cond_dropout_phi: 0.0, ..quick(1) };
    let b = draw_batch(&mut ChaCha8Rng::seed_from_u64(1), &cfg, ds.len(), 2, s.num_steps(), &sampler);
    assert!(b.dropped.iter().all(|d| !d));
}

#[test]
fn tcfg_training_logs_guidance_terms() {
    let (ds, s, dc) = setup();
    let dc = DenoiserConfig { tcfg_enabled: true, ..dc };
    let cfg = TrainConfig { tcfg: Some(TcfgConfig::default()), ..quick(20) };
    let out = train_tcfg(&cfg, &ds, &s, &dc).unwrap();
    assert!(out.log.has_guidance_columns());
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().next().unwrap().contains("loss_g,loss_gc"));
    assert_eq!(text.lines().count(), 21);
    let plain = DenoiserConfig { tcfg_enabled: false, ..dc };
    assert!(train_tcfg(&cfg, &ds, &s, &plain).is_err());
}

#[test]
fn ema_tracks_parameters() {
    let (ds, s, dc) = setup();
    let out = train(&TrainConfig { ema_decay: Some(0.9), ..quick(50) }, &ds, &s, &dc).unwrap();
    let ema = out.ema.unwrap();
    assert_ne!(ema.values(), out.params.values());
    let gap: f64 = ema.values().iter().zip(out.params.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 0.05);
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let (ds, s, dc) = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut init = init_denoiser(&dc, 0).unwrap();
    init.array_mut("layer0.weight").unwrap()[0] = 1e300;
    let err = train_from(&quick(5), &ds, &s, init.clone(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("step 1"));
    let saved = cbdm_core::denoiser::DenoiserParams::load(&dc, dir.path().join("checkpoint_abort.bin"));
    // The poisoned parameters are still finite, so they round-trip.
    assert_eq!(saved.unwrap().values(), init.values());
}

#[test]
fn periodic_checkpoints_are_written() {
    let (ds, s, dc) = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 5, ..quick(10) };
    train_from(&cfg, &ds, &s, init_denoiser(&dc, 1).unwrap(), Some(dir.path())).unwrap();
    assert!(dir.path().join("checkpoint_step5.bin").exists());
    assert!(dir.path().join("checkpoint_step10.bin").exists());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (ds, s, dc) = setup();
    let wrong = DenoiserConfig { num_classes: 4, ..dc.clone() };
    assert!(train(&quick(1), &ds, &s, &wrong).is_err());
    let short = build_schedule(100, 1e-4, 0.02).unwrap();
    assert!(train(&quick(1), &ds, &short, &dc).is_err());
    assert!(train(&TrainConfig { tcfg: Some(TcfgConfig::default()), ..quick(1) }, &ds, &s, &dc).is_err());
}
