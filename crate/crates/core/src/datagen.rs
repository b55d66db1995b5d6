//! Synthetic domain-skewed federations.
//!
//! Every domain shares the same class means (so the label concept is common)
//! but maps them through its own linear transform and noise level, giving
//! identical label marginals and different feature conditionals. Samples of
//! class `c` are drawn as `A (mu_c + noise_scale * difficulty_scale * g)` with
//! `g` standard Gaussian.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::Sample;
use crate::rng::{self, derive_key, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// One mean per class, each of length `feature_dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `feature_dim x feature_dim` matrix.
    pub linear_transform: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub difficulty_scale: f64,
}

impl DomainSpec {
    pub fn feature_dim(&self) -> usize {
        self.linear_transform.len()
    }

    pub fn determinant(&self) -> f64 {
        let d = self.feature_dim();
        let flat: Vec<f64> = self.linear_transform.iter().flatten().copied().collect();
        if flat.len() != d * d {
            return 0.0;
        }
        DMatrix::from_row_slice(d, d, &flat).determinant()
    }

    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        let field = |name: &str| format!("federation.domain_specs[{}].{name}", self.domain_id);
        if self.class_means.len() != num_classes {
            return Err(Error::config(
                field("class_means"),
                format!("exactly num_classes = {num_classes} means"),
            ));
        }
        if self.class_means.iter().any(|m| m.len() != feature_dim) {
            return Err(Error::config(
                field("class_means"),
                format!("every mean has feature_dim = {feature_dim} entries"),
            ));
        }
        if self.linear_transform.len() != feature_dim || self.linear_transform.iter().any(|r| r.len() != feature_dim) {
            return Err(Error::config(
                field("linear_transform"),
                format!("{feature_dim} x {feature_dim} matrix"),
            ));
        }
        if self.determinant().abs() <= 1e-6 {
            return Err(Error::config(field("linear_transform"), "|det| > 1e-6 (invertible)"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config(field("noise_scale"), "noise_scale >= 0"));
        }
        if !(self.difficulty_scale > 0.0 && self.difficulty_scale.is_finite()) {
            return Err(Error::config(field("difficulty_scale"), "difficulty_scale > 0"));
        }
        Ok(())
    }

    fn transform(&self, v: &[f64]) -> Vec<f64> {
        self.linear_transform
            .iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Parameters for generating a family of [`DomainSpec`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDomains {
    /// Standard deviation of the shared class-mean coordinates.
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Domain whose noise is multiplied by `difficulty_scale`.
    pub hard_domain: Option<usize>,
    pub difficulty_scale: f64,
    /// Per-axis scale factors of non-identity transforms are drawn from
    /// `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    pub geometry_seed: u64,
}

impl Default for SyntheticDomains {
    fn default() -> Self {
        Self {
            class_separation: 1.0,
            noise_scale: 0.6,
            hard_domain: Some(3),
            difficulty_scale: 2.0,
            scale_jitter: 0.3,
            geometry_seed: 2024,
        }
    }
}

impl SyntheticDomains {
    /// Domain 0 uses the identity transform; every other domain uses a random
    /// rotation (QR of a Gaussian matrix) times a random diagonal scaling.
    pub fn generate(&self, num_domains: usize, feature_dim: usize, num_classes: usize) -> Vec<DomainSpec> {
        let mut rng = rng::stream(self.geometry_seed, Purpose::Geometry, &[]);
        let class_means: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| self.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();

        (0..num_domains)
            .map(|d| {
                let linear_transform = if d == 0 {
                    (0..feature_dim)
                        .map(|r| (0..feature_dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
                        .collect()
                } else {
                    let gauss = DMatrix::from_fn(feature_dim, feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let q = gauss.qr().q();
                    let scales: Vec<f64> = (0..feature_dim)
                        .map(|_| 1.0 + self.scale_jitter * rng.random_range(-1.0..=1.0))
                        .collect();
                    (0..feature_dim)
                        .map(|r| (0..feature_dim).map(|c| q[(r, c)] * scales[c]).collect())
                        .collect()
                };
                DomainSpec {
                    domain_id: d,
                    class_means: class_means.clone(),
                    linear_transform,
                    noise_scale: self.noise_scale,
                    difficulty_scale: if self.hard_domain == Some(d) {
                        self.difficulty_scale
                    } else {
                        1.0
                    },
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_domains: usize,
    pub clients_per_domain: usize,
    pub samples_per_client: usize,
    pub test_samples_per_domain: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub domain_specs: Vec<DomainSpec>,
}

impl FederationConfig {
    /// Desk-scale default: 4 domains x 5 clients, domain 3 is the hard one.
    pub fn desk_default(seed: u64) -> Self {
        Self::synthetic(4, 5, 40, 400, 8, 4, seed, &SyntheticDomains::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn synthetic(
        num_domains: usize,
        clients_per_domain: usize,
        samples_per_client: usize,
        test_samples_per_domain: usize,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
        domains: &SyntheticDomains,
    ) -> Self {
        Self {
            num_domains,
            clients_per_domain,
            samples_per_client,
            test_samples_per_domain,
            feature_dim,
            num_classes,
            seed,
            domain_specs: domains.generate(num_domains, feature_dim, num_classes),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.num_domains * self.clients_per_domain
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("federation.num_domains", self.num_domains),
            ("federation.clients_per_domain", self.clients_per_domain),
            ("federation.samples_per_client", self.samples_per_client),
            ("federation.test_samples_per_domain", self.test_samples_per_domain),
            ("federation.feature_dim", self.feature_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("federation.num_classes", "num_classes >= 2"));
        }
        if !self.samples_per_client.is_multiple_of(self.num_classes) {
            return Err(Error::config(
                "federation.samples_per_client",
                "divisible by num_classes (stratified sampling)",
            ));
        }
        if !self.test_samples_per_domain.is_multiple_of(self.num_classes) {
            return Err(Error::config(
                "federation.test_samples_per_domain",
                "divisible by num_classes (stratified sampling)",
            ));
        }
        if self.domain_specs.len() != self.num_domains {
            return Err(Error::config(
                "federation.domain_specs",
                format!("exactly num_domains = {} specs", self.num_domains),
            ));
        }
        for (d, spec) in self.domain_specs.iter().enumerate() {
            if spec.domain_id != d {
                return Err(Error::config(
                    format!("federation.domain_specs[{d}].domain_id"),
                    format!("domain_id == position {d}"),
                ));
            }
            spec.validate(self.num_classes, self.feature_dim)?;
        }
        for (a, sa) in self.domain_specs.iter().enumerate() {
            for sb in &self.domain_specs[a + 1..] {
                if sa.linear_transform == sb.linear_transform
                    && sa.noise_scale * sa.difficulty_scale == sb.noise_scale * sb.difficulty_scale
                {
                    return Err(Error::config(
                        format!("federation.domain_specs[{}]", sb.domain_id),
                        format!("differs from domain {a} in linear_transform or noise"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub client_id: usize,
    pub domain_id: usize,
    pub samples: Vec<Sample>,
}

impl ClientData {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    /// Held-out test set per domain, indexed by domain id.
    pub test_sets: Vec<Vec<Sample>>,
}

/// Draws `n` stratified samples (`n / num_classes` per class, class-major order).
pub fn sample_domain(spec: &DomainSpec, n: usize, num_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    if num_classes == 0 || !n.is_multiple_of(num_classes) {
        return Err(Error::config("n", format!("divisible by num_classes = {num_classes}")));
    }
    spec.validate(num_classes, spec.feature_dim())?;
    let mut rng = rng::stream(seed, Purpose::TrainSamples, &[]);
    let sigma = spec.noise_scale * spec.difficulty_scale;
    let per_class = n / num_classes;
    let mut out = Vec::with_capacity(n);
    for (label, mean) in spec.class_means.iter().enumerate() {
        for _ in 0..per_class {
            let latent: Vec<f64> = mean
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(Sample::new(spec.transform(&latent), label));
        }
    }
    Ok(out)
}

/// Client `m` belongs to domain `m / clients_per_domain`. Training and test
/// draws use disjoint key paths under the federation seed.
pub fn make_federation(config: &FederationConfig) -> Result<Federation> {
    config.validate()?;
    let clients = (0..config.num_clients())
        .map(|m| {
            let domain = m / config.clients_per_domain;
            let seed = derive_key(config.seed, &[Purpose::TrainSamples as u64, m as u64]);
            Ok(ClientData {
                client_id: m,
                domain_id: domain,
                samples: sample_domain(
                    &config.domain_specs[domain],
                    config.samples_per_client,
                    config.num_classes,
                    seed,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test_sets = config
        .domain_specs
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            let seed = derive_key(config.seed, &[Purpose::TestSamples as u64, d as u64]);
            sample_domain(spec, config.test_samples_per_domain, config.num_classes, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Federation { clients, test_sets })
}

impl Federation {
    pub fn num_domains(&self) -> usize {
        self.test_sets.len()
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientData::sample_count).collect()
    }

    /// CSV dump with header `split,client_id,domain_id,label,x0,..`.
    /// Test rows have `split = test` and an empty `client_id`. Floats use
    /// the shortest representation that parses back to the same bits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let dim = self
            .clients
            .iter()
            .flat_map(|c| c.samples.first())
            .chain(self.test_sets.iter().flat_map(|t| t.first()))
            .map(|s| s.features.len())
            .next()
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "split".to_string(),
            "client_id".into(),
            "domain_id".into(),
            "label".into(),
        ];
        header.extend((0..dim).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        let row = |split: &str, client: String, domain: usize, s: &Sample| {
            let mut r = vec![split.to_string(), client, domain.to_string(), s.label.to_string()];
            r.extend(s.features.iter().map(|x| format!("{x:?}")));
            r
        };
        for c in &self.clients {
            for s in &c.samples {
                w.write_record(row("train", c.client_id.to_string(), c.domain_id, s))?;
            }
        }
        for (d, set) in self.test_sets.iter().enumerate() {
            for s in set {
                w.write_record(row("test", String::new(), d, s))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len().saturating_sub(4);
        let mut clients: Vec<ClientData> = Vec::new();
        let mut test_sets: Vec<Vec<Sample>> = Vec::new();
        let bad = |detail: String| Error::Parse {
            what: "federation csv",
            detail,
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            check_len("federation csv row", dim + 4, rec.len())?;
            let num =
                |k: usize| -> Result<usize> { rec[k].parse().map_err(|e| bad(format!("row {line} column {k}: {e}"))) };
            let domain = num(2)?;
            let label = num(3)?;
            let features = (4..rec.len())
                .map(|k| {
                    rec[k]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("row {line} column {k}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let sample = Sample::new(features, label);
            match &rec[0] {
                "train" => {
                    let client = num(1)?;
                    if client == clients.len() {
                        clients.push(ClientData {
                            client_id: client,
                            domain_id: domain,
                            samples: Vec::new(),
                        });
                    } else if client + 1 != clients.len() {
                        return Err(bad(format!("row {line}: client rows must be contiguous and ordered")));
                    }
                    clients[client].samples.push(sample);
                }
                "test" => {
                    if domain >= test_sets.len() {
                        test_sets.resize(domain + 1, Vec::new());
                    }
                    test_sets[domain].push(sample);
                }
                other => return Err(bad(format!("row {line}: unknown split `{other}`"))),
            }
        }
        Ok(Self { clients, test_sets })
    }
}
