use crate::data::MixtureSpec;
use crate::error::{config_err, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
pub fn knn_radii2(xs: &[Vec<f64>], k: usize) -> Vec<f64> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, y)| dist2(x, y)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Fraction of reference points inside the union of generated k-NN balls.
pub fn knn_recall(gen: &[Vec<f64>], reference: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 || reference.len() <= k || gen.len() <= k {
        return Err(config_err(format!("knn_recall needs more than k={k} points on each side")));
    }
    let radii = knn_radii2(gen, k);
    let covered = reference
        .iter()
        .filter(|r| gen.iter().zip(&radii).any(|(g, rad)| dist2(r, g) <= *rad))
        .count();
    Ok(covered as f64 / reference.len() as f64)
}

/// Fraction of class `y`'s modes with a generated point within `radius_mult * sigma`.
pub fn mode_coverage(gen: &[Vec<f64>], spec: &MixtureSpec, y: usize, radius_mult: f64) -> Result<f64> {
    if !(radius_mult > 0.0) {
        return Err(config_err("radius_mult must be positive"));
    }
    let modes = &spec
        .classes
        .get(y)
        .ok_or(crate::Error::Label { label: y, num_classes: spec.num_classes() })?
        .centers;
    let r2 = (radius_mult * spec.sigma).powi(2);
    let hit = modes.iter().filter(|m| gen.iter().any(|g| dist2(g, m) <= r2)).count();
    Ok(hit as f64 / modes.len() as f64)
}

/// Mean distance from each generated point to the nearest mode of class `y`.
pub fn mean_distance_to_mode(gen: &[Vec<f64>], spec: &MixtureSpec, y: usize) -> Result<f64> {
    let modes = &spec
        .classes
        .get(y)
        .ok_or(crate::Error::Label { label: y, num_classes: spec.num_classes() })?
        .centers;
    if gen.is_empty() {
        return Err(config_err("mean_distance_to_mode needs samples"));
    }
    let total: f64 = gen.iter().map(|g| modes.iter().map(|m| dist2(g, m)).fold(f64::INFINITY, f64::min).sqrt()).sum();
    Ok(total / gen.len() as f64)
}
