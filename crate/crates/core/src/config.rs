//! Experiment description and its TOML file schema.
//!
//! ```toml
//! method = "fedheal"          # fedavg | fedavg-proportional | fedavg-uniform
//!                             # | fphl-only | fael-only | fedheal   (required)
//! rounds = 100
//! seed = 7
//! tau = 0.3
//! beta = 0.4
//! eval_every = 1
//! std_convention = "population"   # or "sample"
//! log_signs = false
//!
//! [federation]
//! num_domains = 4
//! clients_per_domain = 5
//! samples_per_client = 40
//! test_samples_per_domain = 400
//! feature_dim = 8
//! num_classes = 4
//! seed = 7                    # defaults to the top-level seed
//!
//! [federation.synthetic]      # generator, used unless domain_specs is given
//! class_separation = 1.0
//! noise_scale = 0.6
//! hard_domain = 3
//! difficulty_scale = 2.0
//! scale_jitter = 0.3
//! geometry_seed = 2024
//!
//! [model]
//! hidden_dims = [16]
//!
//! [optimizer]
//! learning_rate = 0.01
//! momentum = 0.9
//! weight_decay = 1e-5
//! batch_size = 16
//! local_epochs = 5
//! ```
//!
//! Every key except `method` is optional. Unknown keys are rejected.
//! Explicit domains can replace the generator with
//! `[[federation.domain_specs]]` tables holding `domain_id`, `class_means`,
//! `linear_transform`, `noise_scale` and `difficulty_scale`; serializing a
//! resolved config always writes them out this way.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainSpec, FederationConfig, SyntheticDomains};
use crate::error::{Error, Result};
use crate::model::{ModelArch, OptimizerConfig};

pub const DEFAULT_TAU: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 0.4;
pub const DEFAULT_ROUNDS: usize = 100;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(alias = "fedavg")]
    FedavgProportional,
    FedavgUniform,
    FphlOnly,
    FaelOnly,
    Fedheal,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedavgProportional,
        Method::FedavgUniform,
        Method::FphlOnly,
        Method::FaelOnly,
        Method::Fedheal,
    ];

    pub fn uses_masking(self) -> bool {
        matches!(self, Method::FphlOnly | Method::Fedheal)
    }

    pub fn uses_reweighting(self) -> bool {
        matches!(self, Method::FaelOnly | Method::Fedheal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedavgProportional => "fedavg-proportional",
            Method::FedavgUniform => "fedavg-uniform",
            Method::FphlOnly => "fphl-only",
            Method::FaelOnly => "fael-only",
            Method::Fedheal => "fedheal",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fedavg" {
            return Ok(Method::FedavgProportional);
        }
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::config(
                "method",
                "one of fedavg, fedavg-proportional, fedavg-uniform, fphl-only, fael-only, fedheal",
            )
        })
    }
}

/// Denominator used for the cross-domain standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdConvention {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: usize,
    pub seed: u64,
    pub tau: f64,
    pub beta: f64,
    pub eval_every: usize,
    pub std_convention: StdConvention,
    pub log_signs: bool,
    pub federation: FederationConfig,
    pub arch: ModelArch,
    pub opt: OptimizerConfig,
}

impl ExperimentConfig {
    /// Default 4-domain federation, one hidden layer of 16 units, 100 rounds.
    pub fn desk_default(method: Method, seed: u64) -> Self {
        let federation = FederationConfig::desk_default(seed);
        let arch = ModelArch {
            input_dim: federation.feature_dim,
            hidden_dims: vec![DEFAULT_HIDDEN],
            num_classes: federation.num_classes,
        };
        Self {
            method,
            rounds: DEFAULT_ROUNDS,
            seed,
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            eval_every: 1,
            std_convention: StdConvention::Population,
            log_signs: false,
            federation,
            arch,
            opt: OptimizerConfig::default(),
        }
    }

    /// Same experiment under a different seed for both data sampling and
    /// training; domain geometry is kept.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.federation.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.arch.validate()?;
        if self.arch.input_dim != self.federation.feature_dim {
            return Err(Error::config("model.input_dim", "equals federation.feature_dim"));
        }
        if self.arch.num_classes != self.federation.num_classes {
            return Err(Error::config("model.num_classes", "equals federation.num_classes"));
        }
        self.opt.validate()?;
        if self.opt.learning_rate <= 0.0 {
            return Err(Error::config("optimizer.learning_rate", "learning_rate > 0"));
        }
        if self.opt.local_epochs == 0 {
            return Err(Error::config("optimizer.local_epochs", "local_epochs >= 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", "tau ∈ [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", "beta ∈ [0,1]"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "eval_every >= 1"));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = FileConfig {
            method: self.method,
            rounds: Some(self.rounds),
            seed: Some(self.seed),
            tau: Some(self.tau),
            beta: Some(self.beta),
            eval_every: Some(self.eval_every),
            std_convention: Some(self.std_convention),
            log_signs: Some(self.log_signs),
            federation: Some(FileFederation {
                num_domains: Some(self.federation.num_domains),
                clients_per_domain: Some(self.federation.clients_per_domain),
                samples_per_client: Some(self.federation.samples_per_client),
                test_samples_per_domain: Some(self.federation.test_samples_per_domain),
                feature_dim: Some(self.federation.feature_dim),
                num_classes: Some(self.federation.num_classes),
                seed: Some(self.federation.seed),
                synthetic: None,
                domain_specs: Some(self.federation.domain_specs.clone()),
            }),
            model: Some(FileModel {
                hidden_dims: Some(self.arch.hidden_dims.clone()),
            }),
            optimizer: Some(FileOptimizer {
                learning_rate: Some(self.opt.learning_rate),
                momentum: Some(self.opt.momentum),
                weight_decay: Some(self.opt.weight_decay),
                batch_size: Some(self.opt.batch_size),
                local_epochs: Some(self.opt.local_epochs),
            }),
        };
        toml::to_string(&file).map_err(|e| Error::Parse {
            what: "config serialization",
            detail: e.to_string(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_convention: Option<StdConvention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_signs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    federation: Option<FileFederation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<FileModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<FileOptimizer>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFederation {
    #[serde(skip_serializing_if = "Option::is_none")]
    num_domains: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clients_per_domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_samples_per_domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticDomains>,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain_specs: Option<Vec<DomainSpec>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_dims: Option<Vec<usize>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOptimizer {
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_epochs: Option<usize>,
}

impl FileConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let seed = self.seed.unwrap_or(0);
        let base = ExperimentConfig::desk_default(self.method, seed);
        let fed = self.federation.unwrap_or_default();
        let defaults = &base.federation;

        let num_domains = fed.num_domains.unwrap_or(defaults.num_domains);
        let feature_dim = fed.feature_dim.unwrap_or(defaults.feature_dim);
        let num_classes = fed.num_classes.unwrap_or(defaults.num_classes);
        let domain_specs = match (fed.domain_specs, fed.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "federation.domain_specs",
                    "give either domain_specs or synthetic, not both",
                ))
            }
            (Some(specs), None) => specs,
            (None, synthetic) => synthetic
                .unwrap_or_default()
                .generate(num_domains, feature_dim, num_classes),
        };
        let federation = FederationConfig {
            num_domains,
            clients_per_domain: fed.clients_per_domain.unwrap_or(defaults.clients_per_domain),
            samples_per_client: fed.samples_per_client.unwrap_or(defaults.samples_per_client),
            test_samples_per_domain: fed.test_samples_per_domain.unwrap_or(defaults.test_samples_per_domain),
            feature_dim,
            num_classes,
            seed: fed.seed.unwrap_or(seed),
            domain_specs,
        };

        let model = self.model.unwrap_or_default();
        let arch = ModelArch {
            input_dim: feature_dim,
            hidden_dims: model.hidden_dims.unwrap_or(base.arch.hidden_dims),
            num_classes,
        };

        let o = self.optimizer.unwrap_or_default();
        let opt = OptimizerConfig {
            learning_rate: o.learning_rate.unwrap_or(base.opt.learning_rate),
            momentum: o.momentum.unwrap_or(base.opt.momentum),
            weight_decay: o.weight_decay.unwrap_or(base.opt.weight_decay),
            batch_size: o.batch_size.unwrap_or(base.opt.batch_size),
            local_epochs: o.local_epochs.unwrap_or(base.opt.local_epochs),
        };

        let config = ExperimentConfig {
            method: self.method,
            rounds: self.rounds.unwrap_or(base.rounds),
            seed,
            tau: self.tau.unwrap_or(base.tau),
            beta: self.beta.unwrap_or(base.beta),
            eval_every: self.eval_every.unwrap_or(base.eval_every),
            std_convention: self.std_convention.unwrap_or_default(),
            log_signs: self.log_signs.unwrap_or(false),
            federation,
            arch,
            opt,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses and validates a TOML experiment description, filling defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let file: FileConfig = toml::from_str(text).map_err(|e| Error::Parse {
        what: "config",
        detail: e.message().to_string(),
    })?;
    file.resolve()
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}
