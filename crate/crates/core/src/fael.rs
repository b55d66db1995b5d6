//! Aggregation-equalized client weighting.
//!
//! Each round every client reports the squared norm of its (masked) update.
//! Client weights then move towards the normalized distances with momentum:
//!
//! ```text
//! dp[m] <- (1 - beta) dp[m] + beta d[m] / sum(d)
//! p[m]  <- p[m] + dp[m],  then p <- p / sum(p)
//! ```
//!
//! Clients whose local models drift further from the global model gain
//! weight, which pulls the aggregate towards the point that equalizes the
//! distances. [`variance_oracle`] solves that equalization problem directly
//! (projected gradient descent on the simplex); it is used to check the
//! cheap rule, never in the aggregation path.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::ParamVector;
use crate::rng::{self, Purpose};

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::OffSimplex("empty weight vector".into()));
    }
    if let Some(bad) = p.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::OffSimplex(format!("entry {bad} is negative or non-finite")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::OffSimplex(format!("weights sum to {sum}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightUpdate {
    Applied,
    /// Every distance was zero; the normalized share is undefined.
    SkippedZeroDistances,
}

/// Client weights `p`, momentum terms `dp` and the momentum factor `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    p: Vec<f64>,
    delta_p: Vec<f64>,
    beta: f64,
}

impl AggregationState {
    /// Starts from `initial` weights with zero momentum.
    pub fn new(initial: Vec<f64>, beta: f64) -> Result<Self> {
        let zeros = vec![0.0; initial.len()];
        Self::from_parts(initial, zeros, beta)
    }

    pub fn from_parts(p: Vec<f64>, delta_p: Vec<f64>, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", "beta ∈ [0,1]"));
        }
        check_simplex(&p)?;
        check_len("AggregationState momentum terms", p.len(), delta_p.len())?;
        if delta_p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("delta_p", "momentum terms >= 0"));
        }
        Ok(Self { p, delta_p, beta })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn delta_p(&self) -> &[f64] {
        &self.delta_p
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Applies one momentum step with the round's distances `d`.
    ///
    /// When every momentum term is exactly zero (e.g. `beta = 0` from a zero
    /// start) `p` is carried over bit for bit instead of being re-divided by
    /// its own sum.
    pub fn update_client_weights(&mut self, d: &[f64]) -> Result<WeightUpdate> {
        check_len("update_client_weights distances", self.p.len(), d.len())?;
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("update_client_weights distances"));
        }
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            return Ok(WeightUpdate::SkippedZeroDistances);
        }
        for (dp, &dm) in self.delta_p.iter_mut().zip(d) {
            *dp = (1.0 - self.beta) * *dp + self.beta * (dm / total);
        }
        if self.delta_p.iter().all(|&v| v == 0.0) {
            return Ok(WeightUpdate::Applied);
        }
        for (pm, dp) in self.p.iter_mut().zip(&self.delta_p) {
            *pm += dp;
        }
        let norm: f64 = self.p.iter().sum();
        self.p.iter_mut().for_each(|pm| *pm /= norm);
        Ok(WeightUpdate::Applied)
    }
}

/// Squared L2 norm of the update restricted to the mask.
pub fn masked_update_distance(delta_w: &ParamVector, mask_row: &[bool]) -> Result<f64> {
    check_len("masked_update_distance", delta_w.len(), mask_row.len())?;
    Ok(delta_w
        .iter()
        .zip(mask_row)
        .filter(|(_, keep)| **keep)
        .map(|(v, _)| v * v)
        .sum())
}

/// Population variance over clients of `||U - w_m||^2`, `U = sum_m p_m w_m`.
///
/// # Panics
/// If the weight count differs from the model count or the models differ in length.
pub fn distance_variance(weights: &[f64], models: &[ParamVector]) -> f64 {
    assert_eq!(weights.len(), models.len(), "one weight per model");
    let Some(first) = models.first() else {
        return 0.0;
    };
    let g = first.len();
    assert!(models.iter().all(|w| w.len() == g), "models must share a length");
    let mut u = vec![0.0; g];
    for (pm, w) in weights.iter().zip(models) {
        for (ui, wi) in u.iter_mut().zip(w.iter()) {
            *ui += pm * wi;
        }
    }
    let dists: Vec<f64> = models
        .iter()
        .map(|w| u.iter().zip(w.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub weights: Vec<f64>,
    pub variance: f64,
    /// False when the best start hit the iteration cap before its step
    /// length fell below tolerance.
    pub converged: bool,
}

/// Objective in terms of the centered Gram matrix of the models.
struct GramObjective {
    gram: Vec<f64>,
    m: usize,
}

impl GramObjective {
    fn new(models: &[ParamVector]) -> Self {
        let m = models.len();
        let g = models[0].len();
        let mut mean = vec![0.0; g];
        for w in models {
            for (a, b) in mean.iter_mut().zip(w.iter()) {
                *a += b / m as f64;
            }
        }
        let centered: Vec<Vec<f64>> = models
            .iter()
            .map(|w| w.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();
        let mut gram = vec![0.0; m * m];
        for j in 0..m {
            for k in j..m {
                let dot: f64 = centered[j].iter().zip(&centered[k]).map(|(a, b)| a * b).sum();
                gram[j * m + k] = dot;
                gram[k * m + j] = dot;
            }
        }
        Self { gram, m }
    }

    fn distances(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        let kp: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|k| self.gram[j * m + k] * p[k]).sum())
            .collect();
        let pkp: f64 = p.iter().zip(&kp).map(|(a, b)| a * b).sum();
        let d = (0..m)
            .map(|j| (pkp - 2.0 * kp[j] + self.gram[j * m + j]).max(0.0))
            .collect();
        (d, kp)
    }

    fn value(&self, p: &[f64]) -> f64 {
        let (d, _) = self.distances(p);
        let n = self.m as f64;
        let mean = d.iter().sum::<f64>() / n;
        d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let m = self.m;
        let (d, kp) = self.distances(p);
        let n = m as f64;
        let mean = d.iter().sum::<f64>() / n;
        (0..m)
            .map(|j| {
                (0..m)
                    .map(|k| (d[k] - mean) * 2.0 * (kp[j] - self.gram[k * m + j]))
                    .sum::<f64>()
                    * 2.0
                    / n
            })
            .collect()
    }
}

/// Projected gradient descent with backtracking from one start.
/// Returns the final point and whether it converged.
fn descend(obj: &GramObjective, start: Vec<f64>, iterations: usize, step: f64) -> (Vec<f64>, bool) {
    let mut x = start;
    let mut fx = obj.value(&x);
    let mut s = step;
    for _ in 0..iterations {
        let g = obj.gradient(&x);
        loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            let y = project_simplex(&trial);
            let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let moved = diff.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if moved < 1e-13 {
                return (x, true);
            }
            let fy = obj.value(&y);
            let linear: f64 = g.iter().zip(&diff).map(|(a, b)| a * b).sum();
            let quad: f64 = diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * s);
            if fy <= fx + linear + quad {
                x = y;
                fx = fy;
                s *= 2.0;
                break;
            }
            s *= 0.5;
            if s < 1e-300 {
                return (x, true);
            }
        }
    }
    (x, false)
}

/// Weights on the simplex minimizing [`distance_variance`].
///
/// The objective is non-convex in general, so descent is restarted from the
/// uniform point, every vertex and `8 M` Dirichlet(1) draws from a fixed
/// stream; the best end point (scored with [`distance_variance`]) wins.
/// `step` is the initial step length; it adapts by halving and doubling.
pub fn variance_oracle(local_models: &[ParamVector], iterations: usize, step: f64) -> Result<OracleResult> {
    let m = local_models.len();
    if m == 0 {
        return Err(Error::EmptyDataset("variance_oracle"));
    }
    let g = local_models[0].len();
    for w in local_models {
        check_len("variance_oracle model length", g, w.len())?;
    }
    if m == 1 {
        return Ok(OracleResult {
            weights: vec![1.0],
            variance: 0.0,
            converged: true,
        });
    }

    let obj = GramObjective::new(local_models);
    let mut starts = vec![vec![1.0 / m as f64; m]];
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        starts.push(e);
    }
    let mut rng = rng::stream(0, Purpose::Oracle, &[m as u64]);
    for _ in 0..8 * m {
        let raw: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        starts.push(raw.into_iter().map(|v| v / total).collect());
    }

    let mut best: Option<OracleResult> = None;
    for start in starts {
        let (weights, converged) = descend(&obj, start, iterations, step);
        let variance = distance_variance(&weights, local_models);
        if best.as_ref().is_none_or(|b| variance < b.variance) {
            best = Some(OracleResult {
                weights,
                variance,
                converged,
            });
        }
    }
    Ok(best.expect("at least one start"))
}
