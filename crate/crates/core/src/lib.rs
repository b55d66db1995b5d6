//! Deterministic federated-learning simulator.
//!
//! The crate builds a synthetic domain-skewed federation, trains a small
//! multilayer perceptron on every client, and aggregates the client updates
//! on the server. Besides plain sample-weighted averaging it implements two
//! server-side mechanisms that target performance fairness across domains:
//!
//! * [`fphl`] tracks, per client and per scalar parameter, the running share
//!   of rounds in which the update was non-negative. Updates whose direction
//!   disagrees with that history are masked out of aggregation and the
//!   surviving client weights are renormalized per parameter.
//! * [`fael`] moves client weights with a momentum rule towards clients whose
//!   (masked) updates are large, which approximately equalizes the distance
//!   between the global model and every local model.
//!
//! [`orchestrator`] drives the round loop, [`metrics`] and [`report`] turn
//! the run into fairness numbers and exports, [`config`] parses experiment
//! files and [`puc`] reproduces the update-consistency histogram.

pub mod config;
pub mod datagen;
pub mod error;
pub mod fael;
pub mod fphl;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod puc;
pub mod report;
pub mod rng;

pub use config::{parse_config, parse_config_str, ExperimentConfig, Method, StdConvention};
pub use datagen::{make_federation, sample_domain, ClientData, DomainSpec, Federation, FederationConfig};
pub use error::{Error, Result};
pub use fael::{distance_variance, masked_update_distance, variance_oracle, AggregationState};
pub use fphl::{compute_puc, importance_mask, per_parameter_weights, ConsistencyTable, ImportanceMask};
pub use metrics::{compute_metrics, FairnessMetrics};
pub use model::{evaluate, init_model, local_train, loss_and_grad, ModelArch, OptimizerConfig, ParamVector, Sample};
pub use orchestrator::{aggregate, fedavg_weights, run_experiment, RunOptions, Server};
pub use puc::{puc_report, PucHistogram, SignLog};
pub use report::{ExperimentReport, RoundRecord};
