//! Cross-domain fairness metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::StdConvention;
use crate::error::{Error, Result};

/// Number of trailing evaluations averaged into a domain's final score.
pub const LAST_EVALUATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    /// Mean of the per-domain scores.
    pub avg: f64,
    /// Standard deviation of the per-domain scores (over domains, not clients).
    pub std: f64,
    pub per_domain: BTreeMap<usize, f64>,
}

/// Each domain scores the mean of its last five evaluations; AVG and STD are
/// taken across those domain scores.
pub fn compute_metrics(
    per_domain_histories: &BTreeMap<usize, Vec<f64>>,
    convention: StdConvention,
) -> Result<FairnessMetrics> {
    if per_domain_histories.is_empty() {
        return Err(Error::config("per_domain_histories", "at least one domain"));
    }
    let mut per_domain = BTreeMap::new();
    for (&domain, history) in per_domain_histories {
        if history.len() < LAST_EVALUATIONS {
            return Err(Error::config(
                format!("per_domain_histories[{domain}]"),
                format!("at least {LAST_EVALUATIONS} evaluations (got {})", history.len()),
            ));
        }
        let tail = &history[history.len() - LAST_EVALUATIONS..];
        per_domain.insert(domain, tail.iter().sum::<f64>() / LAST_EVALUATIONS as f64);
    }
    let n = per_domain.len() as f64;
    let avg = per_domain.values().sum::<f64>() / n;
    let sq: f64 = per_domain.values().map(|s| (s - avg) * (s - avg)).sum();
    let denom = match convention {
        StdConvention::Population => n,
        StdConvention::Sample if n > 1.0 => n - 1.0,
        StdConvention::Sample => 1.0,
    };
    Ok(FairnessMetrics {
        avg,
        std: (sq / denom).sqrt(),
        per_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(entries: &[(usize, Vec<f64>)]) -> BTreeMap<usize, Vec<f64>> {
        entries.iter().cloned().collect()
    }

    #[test]
    fn constant_domains() {
        let h = hist(&[(0, vec![0.8; 6]), (1, vec![0.8; 6]), (2, vec![0.8; 5])]);
        let m = compute_metrics(&h, StdConvention::Population).unwrap();
        assert!((m.avg - 0.8).abs() < 1e-15);
        assert!(m.std.abs() < 1e-15);
    }

    #[test]
    fn two_domain_population_std() {
        let h = hist(&[(0, vec![0.9; 5]), (1, vec![0.7; 5])]);
        let m = compute_metrics(&h, StdConvention::Population).unwrap();
        assert!((m.avg - 0.8).abs() < 1e-12);
        assert!((m.std - 0.1).abs() < 1e-12);
        let s = compute_metrics(&h, StdConvention::Sample).unwrap();
        assert!((s.std - 0.1 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn last_five_of_ramp() {
        let h = hist(&[(0, vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]);
        let m = compute_metrics(&h, StdConvention::Population).unwrap();
        assert!((m.per_domain[&0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn too_few_evaluations_rejected() {
        let h = hist(&[(0, vec![0.5; 5]), (1, vec![0.5; 4])]);
        let err = compute_metrics(&h, StdConvention::Population).unwrap_err();
        assert!(err.to_string().contains("per_domain_histories[1]"), "{err}");
    }
}
