//! Experiment reports and their CSV / JSON exports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{compute_metrics, FairnessMetrics, LAST_EVALUATIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based; round `t` is the aggregation that produced global model `t`.
    pub round: usize,
    /// Present on evaluation rounds only.
    pub per_domain_accuracy: Option<BTreeMap<usize, f64>>,
    /// Client weights `p` used for this round's aggregation.
    pub client_weights: Vec<f64>,
    /// Variance of the squared local-to-aggregate distances at `client_weights`.
    pub distance_variance: f64,
    /// Same quantity at sample-proportional weights, for comparison.
    pub fedavg_distance_variance: f64,
    /// Share of (client, parameter) cells masked out of aggregation.
    pub discarded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Accuracy of the initial global model (round 0).
    pub initial_accuracy: BTreeMap<usize, f64>,
    pub rounds: Vec<RoundRecord>,
    pub final_avg: Option<f64>,
    pub final_std: Option<f64>,
    pub per_domain_final: Option<BTreeMap<usize, f64>>,
    pub weight_trajectory: Vec<Vec<f64>>,
}

impl ExperimentReport {
    /// All evaluations in round order, starting with round 0.
    pub fn evaluations(&self) -> Vec<(usize, &BTreeMap<usize, f64>)> {
        std::iter::once((0, &self.initial_accuracy))
            .chain(
                self.rounds
                    .iter()
                    .filter_map(|r| r.per_domain_accuracy.as_ref().map(|a| (r.round, a))),
            )
            .collect()
    }

    pub fn per_domain_histories(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (_, acc) in self.evaluations() {
            for (&d, &a) in acc {
                out.entry(d).or_default().push(a);
            }
        }
        out
    }

    /// Recomputes the fairness summary from the stored evaluations. `None`
    /// when fewer than five evaluations exist.
    pub fn recompute_metrics(&self) -> Option<FairnessMetrics> {
        if self.evaluations().len() < LAST_EVALUATIONS {
            return None;
        }
        compute_metrics(&self.per_domain_histories(), self.config.std_convention).ok()
    }

    pub(crate) fn finalize(&mut self) {
        let metrics = self.recompute_metrics();
        self.final_avg = metrics.as_ref().map(|m| m.avg);
        self.final_std = metrics.as_ref().map(|m| m.std);
        self.per_domain_final = metrics.map(|m| m.per_domain);
        self.weight_trajectory = self.rounds.iter().map(|r| r.client_weights.clone()).collect();
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json_string()?.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    /// Columns `round,domain,accuracy`: one row per evaluation (round 0
    /// included) and domain, then a summary block of `final` rows, one per
    /// domain followed by `avg` and `std`. Numbers carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "domain", "accuracy"])?;
        for (round, acc) in self.evaluations() {
            for (d, a) in acc {
                out.write_record([round.to_string(), d.to_string(), fmt17(*a)])?;
            }
        }
        if let (Some(avg), Some(std), Some(per_domain)) =
            (self.final_avg, self.final_std, self.per_domain_final.as_ref())
        {
            for (d, s) in per_domain {
                out.write_record(["final".to_string(), d.to_string(), fmt17(*s)])?;
            }
            out.write_record(["final".to_string(), "avg".to_string(), fmt17(avg)])?;
            out.write_record(["final".to_string(), "std".to_string(), fmt17(std)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn export(&self, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        match format {
            ExportFormat::Json => self.write_json(&mut w)?,
            ExportFormat::Csv => self.write_csv(&mut w)?,
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
