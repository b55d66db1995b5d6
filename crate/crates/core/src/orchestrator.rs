//! Server round loop.
//!
//! One round:
//! 1. broadcast the global model and train every client locally (in parallel);
//! 2. collect updates `delta_m = w_m - W`;
//! 3. masking methods fold the updates into the consistency table, compute
//!    the consistency of each update and mask the inconsistent ones;
//! 4. reweighting methods turn masked update norms into new client weights;
//! 5. build per-parameter weights `q` and apply `W_i += sum_m q[m][i] delta_m[i]`.
//!
//! Every client draws its batch order from a stream keyed by
//! `(seed, round, client)`, so results do not depend on the worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::datagen::{make_federation, Federation};
use crate::error::{check_len, Error, Result};
use crate::fael::{distance_variance, masked_update_distance, AggregationState};
use crate::fphl::{importance_mask, per_parameter_weights, ConsistencyTable, ImportanceMask, ParamWeights};
use crate::model::{evaluate, init_model, local_train, ParamVector};
use crate::puc::SignLog;
use crate::report::{ExperimentReport, RoundRecord};
use crate::rng::derive_key;

/// `p_m = N_m / sum_j N_j`.
pub fn fedavg_weights(sample_sizes: &[usize]) -> Result<Vec<f64>> {
    if sample_sizes.is_empty() || sample_sizes.contains(&0) {
        return Err(Error::config("sample_sizes", "non-empty, every size >= 1"));
    }
    let total: usize = sample_sizes.iter().sum();
    Ok(sample_sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

pub fn uniform_weights(num_clients: usize) -> Vec<f64> {
    vec![1.0 / num_clients as f64; num_clients]
}

/// `W_i + sum_m q[m][i] delta_m[i]` for every coordinate.
///
/// Each column of `q` must sum to one, or be all zeros (frozen coordinate).
pub fn aggregate(global: &ParamVector, updates: &[ParamVector], q: &ParamWeights) -> Result<ParamVector> {
    let g = global.len();
    check_len("aggregate: clients", q.num_clients(), updates.len())?;
    check_len("aggregate: weight columns", g, q.num_params())?;
    for u in updates {
        check_len("aggregate: update length", g, u.len())?;
    }
    let mut out = global.clone();
    for i in 0..g {
        let mut step = 0.0;
        let mut mass = 0.0;
        for (m, u) in updates.iter().enumerate() {
            let w = q.get(m, i);
            step += w * u[i];
            mass += w;
        }
        if mass != 0.0 && (mass - 1.0).abs() > 1e-9 {
            return Err(Error::OffSimplex(format!("weight column {i} sums to {mass}")));
        }
        out[i] += step;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Cap on local-training worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// What one round computed, beyond the stored record.
#[derive(Debug, Clone)]
pub struct RoundDetail {
    pub record: RoundRecord,
    pub local_models: Vec<ParamVector>,
    pub updates: Vec<ParamVector>,
    pub mask: ImportanceMask,
    pub weights: ParamWeights,
    /// Momentum terms after this round (all zero for non-reweighting methods).
    pub delta_p: Vec<f64>,
}

/// Server state for one experiment.
pub struct Server<'a> {
    config: &'a ExperimentConfig,
    federation: &'a Federation,
    global: ParamVector,
    table: Option<ConsistencyTable>,
    weights: AggregationState,
    fedavg_p: Vec<f64>,
    round: usize,
    records: Vec<RoundRecord>,
    sign_log: Option<SignLog>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Server<'a> {
    pub fn new(config: &'a ExperimentConfig, federation: &'a Federation, options: &RunOptions) -> Result<Self> {
        config.validate()?;
        let m = federation.clients.len();
        check_len("federation clients", config.federation.num_clients(), m)?;
        let g = config.arch.num_params();
        let fedavg_p = fedavg_weights(&federation.sample_sizes())?;
        let initial = match config.method {
            Method::FedavgUniform => uniform_weights(m),
            _ => fedavg_p.clone(),
        };
        let beta = if config.method.uses_reweighting() {
            config.beta
        } else {
            0.0
        };
        let pool = options
            .threads
            .map(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::config("threads", e.to_string()))
            })
            .transpose()?;
        Ok(Self {
            config,
            federation,
            global: init_model(&config.arch, config.seed),
            table: config.method.uses_masking().then(|| ConsistencyTable::new(m, g)),
            weights: AggregationState::new(initial, beta)?,
            fedavg_p,
            round: 0,
            records: Vec::new(),
            sign_log: config.log_signs.then(|| SignLog::new(m, g)),
            pool,
        })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn table(&self) -> Option<&ConsistencyTable> {
        self.table.as_ref()
    }

    pub fn aggregation_state(&self) -> &AggregationState {
        &self.weights
    }

    pub fn sign_log(&self) -> Option<&SignLog> {
        self.sign_log.as_ref()
    }

    pub fn evaluate_domains(&self) -> Result<BTreeMap<usize, f64>> {
        self.federation
            .test_sets
            .iter()
            .enumerate()
            .map(|(d, set)| Ok((d, evaluate(&self.global, set, &self.config.arch)?)))
            .collect()
    }

    fn train_clients(&self, round: usize) -> Result<Vec<ParamVector>> {
        let cfg = self.config;
        let global = &self.global;
        let work = || {
            self.federation
                .clients
                .par_iter()
                .map(|c| {
                    let seed = derive_key(cfg.seed, &[round as u64, c.client_id as u64]);
                    local_train(global, &c.samples, &cfg.opt, &cfg.arch, seed)
                })
                .collect::<Result<Vec<_>>>()
        };
        match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        }
    }

    pub fn run_round(&mut self) -> Result<RoundDetail> {
        let t = self.round + 1;
        let m = self.federation.clients.len();
        let g = self.global.len();

        let local_models = self.train_clients(t)?;
        let updates = local_models
            .iter()
            .map(|w| w.delta_from(&self.global))
            .collect::<Result<Vec<_>>>()?;
        if let Some(log) = self.sign_log.as_mut() {
            log.record(&updates)?;
        }

        let mask = match self.table.as_mut() {
            Some(table) => {
                table.update_increment_proportions(&updates)?;
                importance_mask(&table.puc_matrix(&updates)?, self.config.tau)
            }
            None => ImportanceMask::all_ones(m, g),
        };

        if self.config.method.uses_reweighting() {
            let d = updates
                .iter()
                .enumerate()
                .map(|(k, u)| masked_update_distance(u, mask.row(k)))
                .collect::<Result<Vec<_>>>()?;
            self.weights.update_client_weights(&d)?;
        }

        let p = self.weights.p().to_vec();
        let weights = match self.config.method {
            Method::FedavgProportional | Method::FedavgUniform => ParamWeights::broadcast(&p, g),
            _ => per_parameter_weights(&p, &mask)?,
        };
        self.global = aggregate(&self.global, &updates, &weights)?;
        if !self.global.all_finite() {
            return Err(Error::NonFinite("aggregate"));
        }
        self.round = t;

        let evaluate_now = t.is_multiple_of(self.config.eval_every) || t == self.config.rounds;
        let record = RoundRecord {
            round: t,
            per_domain_accuracy: if evaluate_now {
                Some(self.evaluate_domains()?)
            } else {
                None
            },
            distance_variance: distance_variance(&p, &local_models),
            fedavg_distance_variance: distance_variance(&self.fedavg_p, &local_models),
            discarded_fraction: mask.discarded_fraction(),
            client_weights: p,
        };
        self.records.push(record.clone());
        Ok(RoundDetail {
            record,
            local_models,
            updates,
            mask,
            weights,
            delta_p: self.weights.delta_p().to_vec(),
        })
    }

    fn into_report(self, initial_accuracy: BTreeMap<usize, f64>) -> (ExperimentReport, Option<SignLog>) {
        let mut report = ExperimentReport {
            config: self.config.clone(),
            initial_accuracy,
            rounds: self.records,
            final_avg: None,
            final_std: None,
            per_domain_final: None,
            weight_trajectory: Vec::new(),
        };
        report.finalize();
        (report, self.sign_log)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub sign_log: Option<SignLog>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_experiment_with(config, &RunOptions::default())?.report)
}

/// Builds the federation, runs every round and evaluates on each domain's
/// held-out set at round 0, every `eval_every` rounds and after the last round.
pub fn run_experiment_with(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    let federation = make_federation(&config.federation)?;
    run_on_federation(config, &federation, options)
}

pub fn run_on_federation(
    config: &ExperimentConfig,
    federation: &Federation,
    options: &RunOptions,
) -> Result<ExperimentOutcome> {
    let mut server = Server::new(config, federation, options)?;
    let initial = server.evaluate_domains()?;
    for _ in 0..config.rounds {
        server.run_round()?;
    }
    let (report, sign_log) = server.into_report(initial);
    Ok(ExperimentOutcome { report, sign_log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn fedavg_weight_cases() {
        assert_eq!(fedavg_weights(&[10, 30]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(fedavg_weights(&[7, 7, 7, 7]).unwrap(), vec![0.25; 4]);
        assert_eq!(fedavg_weights(&[3]).unwrap(), vec![1.0]);
        assert!(fedavg_weights(&[3, 0]).is_err());
    }

    #[test]
    fn aggregate_hand_example() {
        let q = ParamWeights::from_rows(&[vec![0.6, 0.5], vec![0.4, 0.5]]).unwrap();
        let out = aggregate(&pv(&[0.0, 0.0]), &[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])], &q).unwrap();
        assert_eq!(out.as_slice(), &[0.6, 0.5]);
    }

    #[test]
    fn aggregate_identical_updates_and_frozen_columns() {
        let q = ParamWeights::from_rows(&[vec![0.2, 0.0], vec![0.8, 0.0]]).unwrap();
        let up = pv(&[0.5, -2.0]);
        let out = aggregate(&pv(&[1.0, 3.0]), &[up.clone(), up], &q).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert_eq!(out[1], 3.0);
    }

    #[test]
    fn aggregate_rejects_bad_shapes() {
        let q = ParamWeights::from_rows(&[vec![0.7], vec![0.7]]).unwrap();
        assert!(aggregate(&pv(&[0.0]), &[pv(&[1.0]), pv(&[1.0])], &q).is_err());
        let q = ParamWeights::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(aggregate(&pv(&[0.0]), &[pv(&[1.0])], &q).is_err());
    }
}
