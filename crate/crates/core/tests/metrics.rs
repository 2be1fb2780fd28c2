use std::time::Instant;

use cbdm_core::data::{generate_dataset, make_longtail_counts, LongTailDataset, MixtureSpec};
use cbdm_core::metrics::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(n: usize, d: usize, shift: f64, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let s = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Second implementation through symmetric square roots.
fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let fit = |xs: &[Vec<f64>]| {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let m = DVector::from_fn(d, |i, _| xs.iter().map(|x| x[i]).sum::<f64>() / n);
        let c = DMatrix::from_fn(d, d, |i, j| {
            xs.iter().map(|x| (x[i] - m[i]) * (x[j] - m[j])).sum::<f64>() / (n - 1.0) + if i == j { 1e-6 } else { 0.0 }
        });
        (m, c)
    };
    let (m1, c1) = fit(a);
    let (m2, c2) = fit(b);
    let s1 = sym_sqrt(&c1);
    let inner = sym_sqrt(&(&s1 * &c2 * &s1));
    ((&m1 - &m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * inner.trace()).max(0.0).sqrt()
}

#[test]
fn frechet_identity_and_point_masses() {
    let a = cloud(200, 2, 0.0, 1.0, 1);
    assert!(frechet_raw(&a, &a).unwrap() < 1e-7);
    let p = vec![vec![0.0, 0.0]; 10];
    let q = vec![vec![3.0, 4.0]; 10];
    assert!((frechet_raw(&p, &q).unwrap() - 5.0).abs() < 1e-6);
}

#[test]
fn frechet_matches_second_implementation() {
    for seed in 0..20 {
        let d = 2 + (seed as usize % 3);
        let a = cloud(50, d, 0.3, 1.5, seed);
        let b = cloud(70, d, -0.2, 0.7, seed + 100);
        let got = frechet_raw(&a, &b).unwrap();
        let want = frechet_oracle(&a, &b);
        assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn frechet_known_gaussians() {
    // Fits of exact N(0, I) and N(0, 4I) style point sets: W2 = sqrt(sum (s1 - s2)^2).
    let a = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
    let b: Vec<Vec<f64>> = a.iter().map(|x| vec![2.0 * x[0], 2.0 * x[1]]).collect();
    let v1: f64 = 2.0 / 3.0 + 1e-6;
    let v2: f64 = 8.0 / 3.0 + 1e-6;
    let want = (2.0 * (v1.sqrt() - v2.sqrt()).powi(2)).sqrt();
    assert!((frechet_raw(&a, &b).unwrap() - want).abs() < 1e-10);
}

#[test]
fn frechet_needs_two_samples() {
    assert!(frechet_raw(&[vec![0.0]], &[vec![0.0], vec![1.0]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn frechet_symmetric(seed in 0u64..1000, shift in -3.0f64..3.0) {
        let a = cloud(30, 2, 0.0, 1.0, seed);
        let b = cloud(40, 2, shift, 0.5, seed + 1);
        let ab = frechet_raw(&a, &b).unwrap();
        let ba = frechet_raw(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn prd_swap_duality(seed in 0u64..1000, shift in 0.0f64..2.0, beta in 1.5f64..10.0) {
        let a = cloud(80, 2, 0.0, 1.0, seed);
        let b = cloud(60, 2, shift, 0.8, seed + 7);
        let (fb, _) = prd_fbeta_pair(&a, &b, beta, 12, seed).unwrap();
        let (_, fib) = prd_fbeta_pair(&b, &a, beta, 12, seed).unwrap();
        prop_assert!((fb - fib).abs() < 1e-6);
    }

    #[test]
    fn coverage_monotone_in_radius(seed in 0u64..1000) {
        let spec = MixtureSpec::two_mode(4, 2.0, 0.5, 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen: Vec<Vec<f64>> = (0..5).map(|_| spec.sample_class(1, &mut rng)).collect();
        let mut last = 0.0;
        for r in [0.1, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let c = mode_coverage(&gen, &spec, 1, r).unwrap();
            prop_assert!(c >= last);
            last = c;
        }
    }
}

#[test]
fn prd_extremes() {
    let a = cloud(300, 2, 0.0, 1.0, 3);
    assert!(prd_fbeta(&a, &a, 8.0, 20, 0).unwrap() >= 0.99);
    assert!(prd_fbeta(&a, &a, 0.125, 20, 0).unwrap() >= 0.99);
    let far = cloud(300, 2, 100.0, 1.0, 4);
    assert!(prd_fbeta(&a, &far, 8.0, 20, 0).unwrap() <= 0.05);
    assert!(prd_fbeta(&a, &far, 0.125, 20, 0).unwrap() <= 0.05);
    assert!(prd_fbeta(&a, &far, 8.0, 1, 0).is_err());
}

#[test]
fn prd_is_deterministic() {
    let a = cloud(100, 2, 0.0, 1.0, 5);
    let b = cloud(100, 2, 0.5, 1.0, 6);
    assert_eq!(prd_fbeta(&a, &b, 8.0, 10, 9).unwrap(), prd_fbeta(&a, &b, 8.0, 10, 9).unwrap());
}

#[test]
fn prd_recall_side_sees_missing_mode() {
    // gen covers only half of ref: recall-weighted F drops more than precision-weighted F.
    let reference: Vec<Vec<f64>> = cloud(200, 2, -3.0, 0.3, 1).into_iter().chain(cloud(200, 2, 3.0, 0.3, 2)).collect();
    let gen = cloud(400, 2, -3.0, 0.3, 3);
    let (f8, f18) = prd_fbeta_pair(&gen, &reference, 8.0, 20, 0).unwrap();
    assert!(f8 < f18, "f8 {f8} f1/8 {f18}");
}

#[test]
fn knn_recall_boundaries() {
    let a = cloud(100, 2, 0.0, 1.0, 7);
    assert_eq!(knn_recall(&a, &a, 5).unwrap(), 1.0);
    let far = cloud(100, 2, 50.0, 1.0, 8);
    assert_eq!(knn_recall(&far, &a, 5).unwrap(), 0.0);
    assert!(knn_recall(&a, &a[..5], 5).is_err());
}

#[test]
fn knn_recall_stable_under_ref_subsampling() {
    let spec = MixtureSpec::circle(8, 2.0, 0.15).unwrap();
    let reference = generate_dataset(&spec, &[400; 8], 1).unwrap().xs.to_rows();
    let gen = generate_dataset(&spec, &[400; 8], 2).unwrap().xs.to_rows();
    let full = knn_recall(&gen, &reference, 5).unwrap();
    let half: Vec<Vec<f64>> = reference.iter().step_by(2).cloned().collect();
    let sub = knn_recall(&gen, &half, 5).unwrap();
    assert!((full - sub).abs() < 0.05, "{full} vs {sub}");
}

#[test]
fn coverage_cases() {
    let spec = MixtureSpec::two_mode(4, 2.0, 0.5, 0.15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fresh: Vec<Vec<f64>> = (0..500).map(|_| spec.sample_class(2, &mut rng)).collect();
    assert_eq!(mode_coverage(&fresh, &spec, 2, 1.0).unwrap(), 1.0);
    let centre = &spec.classes[2].centers[0];
    let collapsed: Vec<Vec<f64>> = (0..50)
        .map(|_| centre.iter().map(|c| c + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    assert_eq!(mode_coverage(&collapsed, &spec, 2, 2.0).unwrap(), 0.5);
    assert!(mode_coverage(&collapsed, &spec, 2, 0.0).is_err());
}

fn balanced(spec: &MixtureSpec, n: usize, seed: u64) -> LongTailDataset {
    generate_dataset(spec, &vec![n; spec.num_classes()], seed).unwrap()
}

#[test]
fn downstream_balanced_symmetry_and_memorization() {
    let spec = MixtureSpec::circle(8, 2.0, 0.15).unwrap();
    let train = balanced(&spec, 100, 1);
    let test = balanced(&spec, 100, 2);
    let cfg = ClassifierConfig::default();
    let (p, r) = downstream_eval(&train, None, &test, &cfg).unwrap();
    assert!((p - r).abs() < 0.02, "{p} {r}");
    let (_, r_self) = downstream_eval(&test, None, &test, &cfg).unwrap();
    assert!(r_self >= 0.99);
}

#[test]
fn downstream_augmentation_helps_tail() {
    let spec = MixtureSpec::circle(8, 2.0, 0.15).unwrap();
    let lt = generate_dataset(&spec, &make_longtail_counts(500, 8, 0.01).unwrap(), 1).unwrap();
    let extra = generate_dataset(&spec, &[100; 8], 5).unwrap();
    let test = balanced(&spec, 200, 3);
    let cfg = ClassifierConfig { iterations: 200, ..ClassifierConfig::default() };
    let (_, base) = downstream_eval(&lt, None, &test, &cfg).unwrap();
    let (_, aug) = downstream_eval(&lt, Some(&extra), &test, &cfg).unwrap();
    assert!(aug > base, "{aug} vs {base}");
}

#[test]
fn downstream_missing_class_scores_zero_recall() {
    let spec = MixtureSpec::circle(4, 2.0, 0.15).unwrap();
    let train = generate_dataset(&spec, &[50, 50, 50, 0], 1).unwrap();
    let test = balanced(&spec, 50, 2);
    let (_, r) = downstream_eval(&train, None, &test, &ClassifierConfig::default()).unwrap();
    assert!(r <= 0.75 + 1e-12);
    let unbalanced = generate_dataset(&spec, &[5, 6, 5, 5], 2).unwrap();
    assert!(downstream_eval(&train, None, &unbalanced, &ClassifierConfig::default()).is_err());
}

#[test]
fn report_rows_and_ranges() {
    let spec = MixtureSpec::circle(8, 2.0, 0.15).unwrap();
    let reference = balanced(&spec, 100, 1);
    let gen = generate_dataset(&spec, &make_longtail_counts(200, 8, 0.1).unwrap(), 2).unwrap();
    let rep = evaluate("r", &gen, &reference, &spec, &MetricSettings::default()).unwrap();
    assert_eq!(rep.per_class.len(), 8);
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().last().unwrap().starts_with("macro,"));
    assert_eq!(rep, evaluate("r", &gen, &reference, &spec, &MetricSettings::default()).unwrap());
}

#[test]
fn metric_self_tests_are_fast() {
    let start = Instant::now();
    let a = cloud(2000, 2, 0.0, 1.0, 1);
    let b = cloud(2000, 2, 0.3, 1.0, 2);
    frechet_raw(&a, &b).unwrap();
    prd_fbeta_pair(&a, &b, 8.0, 160, 0).unwrap();
    knn_recall(&a, &b, 5).unwrap();
    assert!(start.elapsed().as_secs_f64() < 30.0);
}
