//! Parameter-harmonized aggregation.
//!
//! The server keeps, for every client `m` and parameter `i`, the share
//! `l[m][i]` of rounds so far in which that client's update was non-negative.
//! A round's update is "consistent" with the history in proportion to
//! `c = l` (if the update increments) or `c = 1 - l` (if it decrements).
//! Updates with `c < tau` are masked out and the surviving client weights are
//! renormalized per parameter.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fael::check_simplex;
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FphlConfig {
    pub tau: f64,
}

impl Default for FphlConfig {
    fn default() -> Self {
        Self { tau: 0.3 }
    }
}

impl FphlConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("tau", "tau ∈ [0,1]"));
        }
        Ok(Self { tau })
    }
}

/// Per-client, per-parameter increment proportions plus the round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTable {
    num_clients: usize,
    num_params: usize,
    round_count: u64,
    /// Row-major `num_clients x num_params`.
    proportions: Vec<f64>,
}

impl ConsistencyTable {
    pub fn new(num_clients: usize, num_params: usize) -> Self {
        Self {
            num_clients,
            num_params,
            round_count: 0,
            proportions: vec![0.0; num_clients * num_params],
        }
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn round_count(&self) -> u64 {
        self.round_count
    }

    pub fn proportion(&self, client: usize, param: usize) -> f64 {
        self.proportions[client * self.num_params + param]
    }

    pub fn row(&self, client: usize) -> &[f64] {
        &self.proportions[client * self.num_params..(client + 1) * self.num_params]
    }

    fn check_updates(&self, updates: &[ParamVector]) -> Result<()> {
        check_len(
            "consistency table: number of client updates",
            self.num_clients,
            updates.len(),
        )?;
        for u in updates {
            check_len("consistency table: update length", self.num_params, u.len())?;
        }
        Ok(())
    }

    /// Folds round `t = round_count + 1` into the table:
    /// `l <- (l * (t - 1) + [delta >= 0]) / t`.
    pub fn update_increment_proportions(&mut self, updates: &[ParamVector]) -> Result<()> {
        self.check_updates(updates)?;
        self.round_count += 1;
        let t = self.round_count as f64;
        let prev = t - 1.0;
        for (row, update) in self.proportions.chunks_mut(self.num_params).zip(updates) {
            for (l, &delta) in row.iter_mut().zip(update.iter()) {
                let inc = if delta >= 0.0 { 1.0 } else { 0.0 };
                *l = (*l * prev + inc) / t;
            }
        }
        Ok(())
    }

    /// Consistency of this round's updates against the current table.
    pub fn puc_matrix(&self, updates: &[ParamVector]) -> Result<PucMatrix> {
        self.check_updates(updates)?;
        let values = self
            .proportions
            .chunks(self.num_params)
            .zip(updates)
            .flat_map(|(row, update)| row.iter().zip(update.iter()).map(|(&l, &d)| compute_puc(l, d)))
            .collect();
        Ok(PucMatrix {
            num_clients: self.num_clients,
            num_params: self.num_params,
            values,
        })
    }

    const CHECKPOINT_MAGIC: &'static str = "fedheal-consistency-table v1";

    /// Text checkpoint: a magic line, `round_count num_clients num_params`,
    /// then one whitespace-separated row per client. Values are written in
    /// shortest round-trip form, so reading back is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CHECKPOINT_MAGIC)?;
        writeln!(w, "{} {} {}", self.round_count, self.num_clients, self.num_params)?;
        for row in self.proportions.chunks(self.num_params.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            what: "consistency table checkpoint",
            detail,
        };
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad(format!("missing {what}")))?
                .map_err(Error::from)
        };
        if next("magic line")?.trim() != Self::CHECKPOINT_MAGIC {
            return Err(bad("unrecognized magic line".into()));
        }
        let header: Vec<u64> = next("header")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        let [round_count, m, g] = header[..] else {
            return Err(bad("header must hold round_count num_clients num_params".into()));
        };
        let (m, g) = (m as usize, g as usize);
        let mut proportions = Vec::with_capacity(m * g);
        for client in 0..m {
            let line = next("row")?;
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("row {client}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            check_len("checkpoint row length", g, row.len())?;
            if row.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(bad(format!("row {client}: proportion outside [0,1]")));
            }
            proportions.extend(row);
        }
        Ok(Self {
            num_clients: m,
            num_params: g,
            round_count,
            proportions,
        })
    }
}

/// `l` when the update increments (including zero), `1 - l` otherwise.
pub fn compute_puc(l: f64, delta: f64) -> f64 {
    if delta >= 0.0 {
        l
    } else {
        1.0 - l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PucMatrix {
    pub num_clients: usize,
    pub num_params: usize,
    /// Row-major `num_clients x num_params`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMask {
    num_clients: usize,
    num_params: usize,
    bits: Vec<bool>,
}

impl ImportanceMask {
    pub fn all_ones(num_clients: usize, num_params: usize) -> Self {
        Self {
            num_clients,
            num_params,
            bits: vec![true; num_clients * num_params],
        }
    }

    pub fn from_bits(num_clients: usize, num_params: usize, bits: Vec<bool>) -> Result<Self> {
        check_len("ImportanceMask::from_bits", num_clients * num_params, bits.len())?;
        Ok(Self {
            num_clients,
            num_params,
            bits,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn get(&self, client: usize, param: usize) -> bool {
        self.bits[client * self.num_params + param]
    }

    pub fn row(&self, client: usize) -> &[bool] {
        &self.bits[client * self.num_params..(client + 1) * self.num_params]
    }

    /// Share of (client, parameter) cells that were masked out.
    pub fn discarded_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|b| !**b).count() as f64 / self.bits.len() as f64
    }
}

/// `bit = c >= tau`, inclusive.
pub fn importance_mask(puc: &PucMatrix, tau: f64) -> ImportanceMask {
    ImportanceMask {
        num_clients: puc.num_clients,
        num_params: puc.num_params,
        bits: puc.values.iter().map(|&c| c >= tau).collect(),
    }
}

/// Per-parameter aggregation weights `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamWeights {
    num_clients: usize,
    num_params: usize,
    /// Row-major `num_clients x num_params`.
    values: Vec<f64>,
}

impl ParamWeights {
    /// Every column equal to `p`.
    pub fn broadcast(p: &[f64], num_params: usize) -> Self {
        let values = p.iter().flat_map(|&w| std::iter::repeat_n(w, num_params)).collect();
        Self {
            num_clients: p.len(),
            num_params,
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_params = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_len("ParamWeights::from_rows", num_params, r.len())?;
        }
        Ok(Self {
            num_clients: rows.len(),
            num_params,
            values: rows.concat(),
        })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn get(&self, client: usize, param: usize) -> f64 {
        self.values[client * self.num_params + param]
    }

    pub fn column(&self, param: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_clients).map(move |m| self.get(m, param))
    }
}

/// `q[m][i] = bit[m][i] p[m] / sum_j bit[j][i] p[j]`.
///
/// A column with every bit set keeps `p` as is. A column with no surviving
/// weight is all zeros, which freezes that global parameter for the round.
pub fn per_parameter_weights(p: &[f64], mask: &ImportanceMask) -> Result<ParamWeights> {
    check_simplex(p)?;
    check_len("per_parameter_weights: clients", mask.num_clients, p.len())?;
    let g = mask.num_params;
    let mut values = vec![0.0; p.len() * g];
    for i in 0..g {
        let mut denom = 0.0;
        let mut full = true;
        for (m, &pm) in p.iter().enumerate() {
            if mask.get(m, i) {
                denom += pm;
            } else {
                full = false;
            }
        }
        for (m, &pm) in p.iter().enumerate() {
            values[m * g + i] = if full {
                pm
            } else if mask.get(m, i) && denom > 0.0 {
                pm / denom
            } else {
                0.0
            };
        }
    }
    Ok(ParamWeights {
        num_clients: p.len(),
        num_params: g,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn first_round_increment_gives_one() {
        let mut t = ConsistencyTable::new(1, 2);
        t.update_increment_proportions(&[pv(&[0.5, -0.5])]).unwrap();
        assert_eq!(t.round_count(), 1);
        assert_eq!(t.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_delta_counts_as_increment() {
        let mut t = ConsistencyTable::new(1, 1);
        t.update_increment_proportions(&[pv(&[0.0])]).unwrap();
        assert_eq!(t.proportion(0, 0), 1.0);
        assert_eq!(compute_puc(0.3, 0.0), 0.3);
    }

    #[test]
    fn five_round_recount() {
        // Signs + + + - then -: 3/5 increments, and 0.75 after four rounds.
        let mut t = ConsistencyTable::new(1, 1);
        for d in [1.0, 2.0, -1.0, 3.0] {
            t.update_increment_proportions(&[pv(&[d])]).unwrap();
        }
        assert_eq!(t.proportion(0, 0), 0.75);
        t.update_increment_proportions(&[pv(&[-0.1])]).unwrap();
        assert!((t.proportion(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn all_increments_fixed_point() {
        let mut t = ConsistencyTable::new(1, 1);
        for _ in 0..5 {
            t.update_increment_proportions(&[pv(&[1.0])]).unwrap();
        }
        assert_eq!(t.proportion(0, 0), 1.0);
    }

    #[test]
    fn update_rejects_bad_shapes() {
        let mut t = ConsistencyTable::new(2, 3);
        assert!(t.update_increment_proportions(&[pv(&[1.0, 1.0, 1.0])]).is_err());
        assert!(t
            .update_increment_proportions(&[pv(&[1.0, 1.0]), pv(&[1.0, 1.0])])
            .is_err());
        assert_eq!(t.round_count(), 0);
    }

    #[test]
    fn puc_cases() {
        assert_eq!(compute_puc(0.8, 0.1), 0.8);
        assert!((compute_puc(0.8, -0.1) - 0.2).abs() < 1e-15);
        assert_eq!(compute_puc(0.5, 3.0), 0.5);
        assert_eq!(compute_puc(0.5, -3.0), 0.5);
    }

    #[test]
    fn mask_threshold_is_inclusive() {
        let puc = PucMatrix {
            num_clients: 1,
            num_params: 3,
            values: vec![0.9, 0.2, 0.3],
        };
        let mask = importance_mask(&puc, 0.3);
        assert_eq!(mask.row(0), &[true, false, true]);
        let all = importance_mask(&puc, 0.0);
        assert!(all.row(0).iter().all(|b| *b));
        assert!((mask.discarded_fraction() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn renormalized_column() {
        let p = [0.5, 0.3, 0.2];
        let mask = ImportanceMask::from_bits(3, 1, vec![true, false, true]).unwrap();
        let q = per_parameter_weights(&p, &mask).unwrap();
        let col: Vec<f64> = q.column(0).collect();
        assert!((col[0] - 0.5 / 0.7).abs() < 1e-12);
        assert_eq!(col[1], 0.0);
        assert!((col[2] - 0.2 / 0.7).abs() < 1e-12);
        assert!((col[0] - 0.714286).abs() < 1e-6 && (col[2] - 0.285714).abs() < 1e-6);
    }

    #[test]
    fn full_mask_is_identity_and_empty_column_is_frozen() {
        let p = [0.5, 0.3, 0.2];
        let q = per_parameter_weights(&p, &ImportanceMask::all_ones(3, 4)).unwrap();
        for i in 0..4 {
            assert_eq!(q.column(i).collect::<Vec<_>>(), p);
        }
        let none = ImportanceMask::from_bits(3, 1, vec![false; 3]).unwrap();
        let q = per_parameter_weights(&p, &none).unwrap();
        assert!(q.column(0).all(|v| v == 0.0));
    }

    #[test]
    fn off_simplex_rejected() {
        let mask = ImportanceMask::all_ones(2, 1);
        assert!(matches!(
            per_parameter_weights(&[0.5, 0.6], &mask),
            Err(Error::OffSimplex(_))
        ));
        assert!(per_parameter_weights(&[1.2, -0.2], &mask).is_err());
    }

    #[test]
    fn tau_range() {
        assert!(FphlConfig::new(0.3).is_ok());
        let err = FphlConfig::new(1.5).unwrap_err();
        assert!(err.to_string().contains("tau ∈ [0,1]"));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut t = ConsistencyTable::new(3, 4);
        for r in 0..7 {
            let ups: Vec<ParamVector> = (0..3)
                .map(|m| pv(&(0..4).map(|i| ((r * 7 + m * 3 + i) as f64).sin()).collect::<Vec<_>>()))
                .collect();
            t.update_increment_proportions(&ups).unwrap();
        }
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf).unwrap();
        let back = ConsistencyTable::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(ConsistencyTable::read_checkpoint(&b"nope\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn column_stochastic_and_amplifying(
            raw in proptest::collection::vec(0.01f64..1.0, 2..6),
            bits in proptest::collection::vec(any::<bool>(), 6 * 5),
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let m = p.len();
            let g = 5;
            let mask = ImportanceMask::from_bits(m, g, bits[..m * g].to_vec()).unwrap();
            let q = per_parameter_weights(&p, &mask).unwrap();
            for i in 0..g {
                let survivors = (0..m).filter(|&k| mask.get(k, i)).count();
                let sum: f64 = q.column(i).sum();
                if survivors > 0 {
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
                for (k, &pk) in p.iter().enumerate() {
                    if mask.get(k, i) {
                        prop_assert!(q.get(k, i) >= pk * (1.0 - 1e-12));
                    } else {
                        prop_assert_eq!(q.get(k, i), 0.0);
                    }
                }
            }
        }

        #[test]
        fn proportions_stay_in_unit_interval_and_count_like(
            deltas in proptest::collection::vec(-1.0f64..1.0, 1..40),
        ) {
            let mut t = ConsistencyTable::new(1, 1);
            for (k, d) in deltas.iter().enumerate() {
                t.update_increment_proportions(&[pv(&[*d])]).unwrap();
                let l = t.proportion(0, 0);
                prop_assert!((0.0..=1.0).contains(&l));
                let scaled = l * (k + 1) as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            }
        }
    }
}
