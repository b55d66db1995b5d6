//! Update-direction consistency histograms.
//!
//! With sign logging enabled the orchestrator records, every round, whether
//! each client's update to each parameter was non-negative. For a window of
//! the last `W` rounds a parameter's consistency is
//! `max(#increments, #decrements)`, an integer in `[ceil(W/2), W]`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::ParamVector;

pub const NUM_BINS: usize = 10;

/// Per-round, per-client, per-parameter update signs (`true` = `delta >= 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct SignLog {
    num_clients: usize,
    num_params: usize,
    /// One row-major `num_clients x num_params` block per round.
    rounds: Vec<Vec<bool>>,
}

impl SignLog {
    pub fn new(num_clients: usize, num_params: usize) -> Self {
        Self {
            num_clients,
            num_params,
            rounds: Vec::new(),
        }
    }

    pub fn record(&mut self, updates: &[ParamVector]) -> Result<()> {
        check_len("SignLog::record clients", self.num_clients, updates.len())?;
        let mut block = Vec::with_capacity(self.num_clients * self.num_params);
        for u in updates {
            check_len("SignLog::record params", self.num_params, u.len())?;
            block.extend(u.iter().map(|&d| d >= 0.0));
        }
        self.rounds.push(block);
        Ok(())
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Sign history of one client's parameters over the last `window`
    /// rounds, indexed `[param][round]`.
    pub fn history(&self, client: usize, window: usize) -> Result<Vec<Vec<bool>>> {
        if client >= self.num_clients {
            return Err(Error::config("client", format!("client < {}", self.num_clients)));
        }
        if window == 0 || window > self.rounds.len() {
            return Err(Error::config(
                "window",
                format!("1 <= window <= logged rounds ({})", self.rounds.len()),
            ));
        }
        let start = self.rounds.len() - window;
        let base = client * self.num_params;
        Ok((0..self.num_params)
            .map(|i| self.rounds[start..].iter().map(|r| r[base + i]).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PucHistogram {
    pub client_id: usize,
    pub window: usize,
    /// Bin `k` counts parameters with `floor(10 * consistency / window) == k`;
    /// `consistency == window` falls in the last bin.
    pub bins: Vec<u64>,
    /// `counts[c]` = number of parameters with consistency exactly `c`.
    pub counts: Vec<u64>,
}

impl PucHistogram {
    /// `history[param][round]`, every row of length `window`.
    pub fn from_history(client_id: usize, window: usize, history: &[Vec<bool>]) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window", "window >= 1"));
        }
        let mut counts = vec![0u64; window + 1];
        for row in history {
            check_len("PucHistogram row", window, row.len())?;
            let inc = row.iter().filter(|b| **b).count();
            counts[inc.max(window - inc)] += 1;
        }
        let mut bins = vec![0u64; NUM_BINS];
        for (c, &n) in counts.iter().enumerate() {
            bins[bin_of(c, window)] += n;
        }
        Ok(Self {
            client_id,
            window,
            bins,
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fraction_at_least(&self, consistency: usize) -> f64 {
        let hits: u64 = self.counts.iter().skip(consistency).sum();
        hits as f64 / self.total().max(1) as f64
    }

    pub fn mean_consistency(&self) -> f64 {
        let weighted: f64 = self.counts.iter().enumerate().map(|(c, &n)| c as f64 * n as f64).sum();
        weighted / self.total().max(1) as f64
    }

    /// Bin probabilities under independent fair-coin signs, for comparison.
    pub fn null_bins(&self) -> Vec<f64> {
        let mut bins = vec![0.0; NUM_BINS];
        for (c, p) in consistency_null_pmf(self.window).into_iter().enumerate() {
            bins[bin_of(c, self.window)] += p;
        }
        bins
    }
}

fn bin_of(consistency: usize, window: usize) -> usize {
    (consistency * NUM_BINS / window).min(NUM_BINS - 1)
}

/// Consistency histogram of `client` over the last `window` logged rounds.
pub fn puc_report(log: Option<&SignLog>, client: usize, window: usize) -> Result<PucHistogram> {
    let log = log.ok_or(Error::SignLoggingDisabled)?;
    let history = log.history(client, window)?;
    PucHistogram::from_history(client, window, &history)
}

/// Distribution of `max(X, W - X)` for `X ~ Binomial(W, 1/2)`, indexed by value.
pub fn consistency_null_pmf(window: usize) -> Vec<f64> {
    let w = window as f64;
    let mut ln_choose = vec![0.0; window + 1];
    for k in 1..=window {
        ln_choose[k] = ln_choose[k - 1] + ((w - k as f64 + 1.0) / k as f64).ln();
    }
    let binom: Vec<f64> = ln_choose
        .iter()
        .map(|lc| (lc - w * std::f64::consts::LN_2).exp())
        .collect();
    (0..=window)
        .map(|c| {
            let other = window - c.min(window);
            if 2 * c < window {
                0.0
            } else if 2 * c == window {
                binom[c]
            } else {
                binom[c] + binom[other]
            }
        })
        .collect()
}

/// `P(max(X, W - X) >= threshold)` under fair-coin signs.
pub fn null_tail(window: usize, threshold: usize) -> f64 {
    consistency_null_pmf(window).into_iter().skip(threshold).sum()
}

pub fn null_mean(window: usize) -> f64 {
    consistency_null_pmf(window)
        .into_iter()
        .enumerate()
        .map(|(c, p)| c as f64 * p)
        .sum()
}
