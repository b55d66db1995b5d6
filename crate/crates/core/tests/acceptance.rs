//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use fedheal::fael::check_simplex;
use fedheal::orchestrator::{run_experiment_with, RunOptions};
use fedheal::puc::{null_mean, null_tail, NUM_BINS};
use fedheal::{
    distance_variance, loss_and_grad, make_federation, puc_report, run_experiment, variance_oracle, ConsistencyTable,
    ExperimentConfig, Method, ParamVector, Server,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// 1. DP update equals a brute-force recount over 1000 random histories.
fn dp_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (m, g, rounds) = (5, 200, 50);
    let mut r = common::rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut table = ConsistencyTable::new(m, g);
        let mut counts = vec![0u32; m * g];
        for _ in 0..rounds {
            let ups: Vec<ParamVector> = (0..m)
                .map(|_| ParamVector::from_vec((0..g).map(|_| r.random_range(-1.0..1.0)).collect()))
                .collect();
            for (k, u) in ups.iter().enumerate() {
                for (i, d) in u.iter().enumerate() {
                    counts[k * g + i] += u32::from(*d >= 0.0);
                }
            }
            table.update_increment_proportions(&ups).map_err(|e| e.to_string())?;
        }
        for k in 0..m {
            for i in 0..g {
                let recount = counts[k * g + i] as f64 / rounds as f64;
                worst = worst.max((table.proportion(k, i) - recount).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("max deviation {worst:e}, {elapsed:.2?}"))
}

fn trajectory(config: &ExperimentConfig) -> Result<Vec<ParamVector>, String> {
    let fed = make_federation(&config.federation).map_err(|e| e.to_string())?;
    let mut server = Server::new(config, &fed, &RunOptions::default()).map_err(|e| e.to_string())?;
    (0..config.rounds)
        .map(|_| {
            server.run_round().map_err(|e| e.to_string())?;
            Ok(server.global().clone())
        })
        .collect()
}

/// 2. tau = 0 / beta = 0 degeneracies, bit for bit, on the default federation.
fn degeneracy_chain() -> Outcome {
    let start = Instant::now();
    let seed = 2024;
    let cfg = |method: Method, tau: f64, beta: f64| ExperimentConfig {
        tau,
        beta,
        ..ExperimentConfig::desk_default(method, seed)
    };
    let pairs = [
        (
            "fedheal(tau=0,beta=0) == fedavg-proportional",
            cfg(Method::Fedheal, 0.0, 0.0),
            cfg(Method::FedavgProportional, 0.3, 0.4),
        ),
        (
            "fedheal(tau=0) == fael-only",
            cfg(Method::Fedheal, 0.0, 0.4),
            cfg(Method::FaelOnly, 0.0, 0.4),
        ),
        (
            "fedheal(beta=0) == fphl-only",
            cfg(Method::Fedheal, 0.3, 0.0),
            cfg(Method::FphlOnly, 0.3, 0.0),
        ),
    ];
    for (name, a, b) in pairs {
        let ta = trajectory(&a)?;
        let tb = trajectory(&b)?;
        ensure(ta.len() == 100 && ta == tb, || {
            let first = ta.iter().zip(&tb).position(|(x, y)| x != y);
            format!("{name}: trajectories diverge at round {first:?}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("3 pairs x 100 rounds bit-identical, {elapsed:.2?}"))
}

/// 3. q columns, p, dp and amplification over a full fedheal run.
fn weight_system_invariants() -> Outcome {
    let config = ExperimentConfig::desk_default(Method::Fedheal, 11);
    let fed = make_federation(&config.federation).map_err(|e| e.to_string())?;
    let mut server = Server::new(&config, &fed, &RunOptions::default()).map_err(|e| e.to_string())?;
    let mut worst_col: f64 = 0.0;
    let mut discarded = 0.0;
    for _ in 0..config.rounds {
        let d = server.run_round().map_err(|e| e.to_string())?;
        let t = d.record.round;
        let p = &d.record.client_weights;
        check_simplex(p).map_err(|e| format!("round {t}: {e}"))?;
        ensure(d.delta_p.iter().all(|v| *v >= 0.0), || {
            format!("round {t}: negative dp")
        })?;
        for i in 0..d.weights.num_params() {
            let survivors = (0..p.len()).filter(|&m| d.mask.get(m, i)).count();
            let sum: f64 = d.weights.column(i).sum();
            if survivors > 0 {
                worst_col = worst_col.max((sum - 1.0).abs());
                ensure((sum - 1.0).abs() <= 1e-9, || {
                    format!("round {t} column {i} sums to {sum}")
                })?;
            }
            for (m, &pm) in p.iter().enumerate() {
                let q = d.weights.get(m, i);
                if d.mask.get(m, i) {
                    ensure(q >= pm * (1.0 - 1e-12), || {
                        format!("round {t} q[{m}][{i}]={q} < p={pm}")
                    })?;
                } else {
                    ensure(q == 0.0, || format!("round {t} masked q[{m}][{i}]={q}"))?;
                }
            }
        }
        discarded += d.record.discarded_fraction;
    }
    ensure(discarded > 0.0, || {
        "no cell was ever masked; run does not exercise masking".into()
    })?;
    Ok(format!(
        "100 rounds, max |column sum - 1| {worst_col:e}, mean discarded {:.3}",
        discarded / config.rounds as f64
    ))
}

/// 4. Analytic gradients vs central differences on 50 random instances.
fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 1000..1050 {
        let (arch, params, batch) = common::random_instance(seed);
        let (_, grad) = loss_and_grad(&params, &batch, &arch).map_err(|e| e.to_string())?;
        let fd = common::finite_difference_grad(&params, &batch, &arch, 1e-5);
        for (a, b) in grad.iter().zip(&fd) {
            worst = worst.max(common::relative_error(*a, *b));
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:e}"))
}

/// 5. Variance oracle vs 1-D grid (M = 2) and vs random simplex points (M <= 5).
fn variance_oracle_optimality() -> Outcome {
    let mut r = common::rng(5);
    let mut worst_gap: f64 = 0.0;
    for _ in 0..100 {
        let g = r.random_range(2..10);
        let models = common::random_models(&mut r, 2, g);
        let oracle = variance_oracle(&models, 2000, 0.1).map_err(|e| e.to_string())?;
        let (a, _) = common::grid_search_pair(&models, 0.001);
        worst_gap = worst_gap.max((oracle.weights[0] - a).abs());
    }
    ensure(worst_gap <= 0.01, || format!("pair weight gap {worst_gap}"))?;

    let mut instances = 0;
    for m in 2..=5 {
        for _ in 0..10 {
            let g = r.random_range(2..12);
            let models = common::random_models(&mut r, m, g);
            let oracle = variance_oracle(&models, 2000, 0.1).map_err(|e| e.to_string())?;
            check_simplex(&oracle.weights).map_err(|e| e.to_string())?;
            let uniform = vec![1.0 / m as f64; m];
            ensure(oracle.variance <= distance_variance(&uniform, &models) + 1e-9, || {
                format!("M={m}: worse than uniform")
            })?;
            for _ in 0..100 {
                let p = common::random_simplex(&mut r, m);
                let v = distance_variance(&p, &models);
                ensure(oracle.variance <= v + 1e-9, || {
                    format!("M={m}: oracle {} > random point {v}", oracle.variance)
                })?;
            }
            instances += 1;
        }
    }
    Ok(format!(
        "pair gap {worst_gap:.4}; {instances} instances with M<=5 beat 100 random points"
    ))
}

/// 6. Median STD drops under fedheal, median AVG within one point of fedavg.
fn fairness_improvement() -> Outcome {
    let start = Instant::now();
    let mut avg = [Vec::new(), Vec::new()];
    let mut std = [Vec::new(), Vec::new()];
    for seed in 0..10 {
        for (k, method) in [Method::FedavgProportional, Method::Fedheal].into_iter().enumerate() {
            let config = ExperimentConfig::desk_default(method, seed);
            ensure(
                config.federation.domain_specs.iter().any(|s| s.difficulty_scale >= 2.0),
                || "default federation has no hard domain".into(),
            )?;
            let report = run_experiment(&config).map_err(|e| e.to_string())?;
            avg[k].push(report.final_avg.ok_or("missing AVG")?);
            std[k].push(report.final_std.ok_or("missing STD")?);
        }
    }
    let (avg_fedavg, avg_heal) = (median(avg[0].clone()), median(avg[1].clone()));
    let (std_fedavg, std_heal) = (median(std[0].clone()), median(std[1].clone()));
    let elapsed = start.elapsed();
    let summary = format!(
        "median STD {:.2} -> {:.2}, median AVG {:.2} -> {:.2} (points), {elapsed:.1?}",
        100.0 * std_fedavg,
        100.0 * std_heal,
        100.0 * avg_fedavg,
        100.0 * avg_heal
    );
    ensure(std_heal < std_fedavg, || format!("STD not lower: {summary}"))?;
    ensure(avg_heal >= avg_fedavg - 0.01, || {
        format!("AVG dropped by more than 1 point: {summary}")
    })?;
    ensure(elapsed < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

/// 7. Update-direction consistency of a hard-domain client under FedAvg.
fn puc_observation() -> Outcome {
    let mut config = ExperimentConfig::desk_default(Method::FedavgProportional, 0);
    config.log_signs = true;
    let hard = config
        .federation
        .domain_specs
        .iter()
        .position(|s| s.difficulty_scale > 1.0)
        .ok_or("no hard domain")?;
    let client = hard * config.federation.clients_per_domain;
    let outcome = run_experiment_with(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
    let window = 100;
    let h = puc_report(outcome.sign_log.as_ref(), client, window).map_err(|e| e.to_string())?;
    ensure(h.total() as usize == config.arch.num_params(), || {
        "histogram does not cover G".into()
    })?;

    let observed = h.fraction_at_least(90);
    let expected = null_tail(window, 90);
    ensure(observed > 1000.0 * expected, || {
        format!("fraction >= 90/100 is {observed}, null {expected:e}")
    })?;
    let null_bins = h.null_bins();
    let top = (h.bins[NUM_BINS - 1] as f64) / h.total() as f64;
    let upper_obs: f64 = h.bins[7..].iter().sum::<u64>() as f64 / h.total() as f64;
    let upper_null: f64 = null_bins[7..].iter().sum();
    ensure(
        h.mean_consistency() > null_mean(window) && top > null_bins[NUM_BINS - 1] && upper_obs > upper_null,
        || format!("histogram not right-heavy: {:?}", h.bins),
    )?;
    Ok(format!(
        "client {client}: {:.1}% of parameters >= 90/100 (null {expected:.2e}), mean {:.1} vs null {:.1}, bins {:?}",
        100.0 * observed,
        h.mean_consistency(),
        null_mean(window),
        h.bins
    ))
}

/// 8. Byte-identical JSON across reruns and worker counts.
fn determinism() -> Outcome {
    let mut exports = Vec::new();
    for method in [Method::Fedheal, Method::FedavgProportional] {
        let config = ExperimentConfig::desk_default(method, 77);
        for threads in [Some(1), Some(4), None, Some(1)] {
            let report = run_experiment_with(&config, &RunOptions { threads })
                .map_err(|e| e.to_string())?
                .report;
            let mut bytes = Vec::new();
            report.write_json(&mut bytes).map_err(|e| e.to_string())?;
            exports.push((method, bytes));
        }
    }
    for method in [Method::Fedheal, Method::FedavgProportional] {
        let runs: Vec<&Vec<u8>> = exports.iter().filter(|(m, _)| *m == method).map(|(_, b)| b).collect();
        ensure(runs.windows(2).all(|w| w[0] == w[1]), || {
            format!("{method}: exports differ")
        })?;
    }
    Ok("fedheal and fedavg, 4 runs each at 1/4/default/1 threads: identical bytes".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 DP-oracle equivalence", dp_oracle_equivalence),
        ("2 degeneracy chain", degeneracy_chain),
        ("3 weight-system invariants", weight_system_invariants),
        ("4 gradient correctness", gradient_correctness),
        ("5 variance-oracle optimality", variance_oracle_optimality),
        ("6 fairness improvement", fairness_improvement),
        ("7 PUC observation", puc_observation),
        ("8 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
