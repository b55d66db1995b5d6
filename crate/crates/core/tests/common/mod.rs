//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use fedheal::{loss_and_grad, ModelArch, ParamVector, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite difference of the mean loss, one coordinate at a time.
pub fn finite_difference_grad(params: &ParamVector, batch: &[Sample], arch: &ModelArch, h: f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += h;
            minus[i] -= h;
            let (lp, _) = loss_and_grad(&plus, batch, arch).unwrap();
            let (lm, _) = loss_and_grad(&minus, batch, arch).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-5)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub fn random_instance(seed: u64) -> (ModelArch, ParamVector, Vec<Sample>) {
    let mut r = rng(seed);
    let input = r.random_range(1..=4);
    let hidden: Vec<usize> = (0..r.random_range(0..=2)).map(|_| r.random_range(1..=5)).collect();
    let classes = r.random_range(2..=4);
    let arch = ModelArch::new(input, hidden, classes).unwrap();
    let params = ParamVector::from_vec((0..arch.num_params()).map(|_| r.random_range(-1.0..1.0)).collect());
    let batch = (0..r.random_range(1..=6))
        .map(|_| {
            Sample::new(
                (0..input).map(|_| r.random_range(-2.0..2.0)).collect(),
                r.random_range(0..classes),
            )
        })
        .collect();
    (arch, params, batch)
}

/// Uniform point on the simplex: normalized Exp(1) draws.
pub fn random_simplex(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -(1.0 - r.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn random_models(r: &mut ChaCha8Rng, m: usize, g: usize) -> Vec<ParamVector> {
    (0..m)
        .map(|_| ParamVector::from_vec((0..g).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect()
}

/// Recounts `l[m][i]` from scratch over a full history `history[round][m][i]`.
pub fn recount_proportions(history: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = history[0].len();
    let g = history[0][0].len();
    let t = history.len() as f64;
    (0..m)
        .map(|k| {
            (0..g)
                .map(|i| history.iter().filter(|round| round[k][i] >= 0.0).count() as f64 / t)
                .collect()
        })
        .collect()
}

/// 1-D grid search over `p = (a, 1 - a)`, `a` in steps of `step`.
pub fn grid_search_pair(models: &[ParamVector], step: f64) -> (f64, f64) {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|k| {
            let a = k as f64 * step;
            (a, fedheal::distance_variance(&[a, 1.0 - a], models))
        })
        .fold(
            (0.0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}
