//! `fedheal` command-line runner.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedheal::orchestrator::{run_experiment_with, RunOptions};
use fedheal::puc::NUM_BINS;
use fedheal::report::ExportFormat;
use fedheal::{parse_config, puc_report, ExperimentConfig, ExperimentReport, Method, StdConvention};
use rayon::prelude::*;

const THREADS_ENV: &str = "FEDHEAL_THREADS";

#[derive(Parser)]
#[command(name = "fedheal", version, about = "Federated learning fairness simulator")]
struct Cli {
    /// Worker threads (overrides FEDHEAL_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and export its report.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Seed for data sampling and training.
        #[arg(long)]
        seed: Option<u64>,
        /// Record update signs (needed for consistency histograms).
        #[arg(long)]
        log_signs: bool,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Run several methods over a seed grid and summarize AVG / STD.
    Compare {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Seeds: `7`, `1,2,5` or a half-open range `0..10`.
        #[arg(long)]
        seed: String,
        /// Comma-separated methods.
        #[arg(
            long,
            default_value = "fedavg-proportional,fedavg-uniform,fphl-only,fael-only,fedheal"
        )]
        methods: String,
        /// Write each run's JSON report into this directory.
        #[arg(long)]
        reports_dir: Option<PathBuf>,
        /// Summary CSV destination (stdout when omitted).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Grid over tau and beta for fedheal.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "0")]
        seed: String,
        /// Comma-separated tau values.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        taus: String,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0,0.2,0.4,0.6,0.8")]
        betas: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Update-direction consistency histogram of one client.
    PucReport {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        client: usize,
        /// Number of most recent rounds to analyse.
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Use the sample (n-1) standard deviation across domains.
    #[arg(long)]
    sample_std: bool,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Destination file (stdout when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

impl ExperimentArgs {
    fn resolve(&self, default_method: Method, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::desk_default(default_method, 0),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        if self.sample_std {
            cfg.std_convention = StdConvention::Sample;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        (a..b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!(fedheal::Error::config("seed", "at least one seed"));
    }
    Ok(seeds)
}

fn parse_list<T: std::str::FromStr>(field: &'static str, text: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| fedheal::Error::config(field, format!("comma-separated list, got `{s}`")).into())
        })
        .collect()
}

fn writer(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn summary_line(report: &ExperimentReport) -> String {
    let shown = |v: Option<f64>| v.map_or_else(|| "n/a (fewer than 5 evaluations)".to_string(), |x| format!("{x:.6}"));
    format!(
        "{} seed {}: AVG {} STD {}",
        report.config.method,
        report.config.seed,
        shown(report.final_avg),
        shown(report.final_std)
    )
}

fn run_grid(configs: &[ExperimentConfig]) -> anyhow::Result<Vec<ExperimentReport>> {
    // Runs are independent; each uses the ambient pool for its clients.
    Ok(configs
        .par_iter()
        .map(|c| run_experiment_with(c, &RunOptions::default()).map(|o| o.report))
        .collect::<fedheal::Result<Vec<_>>>()?)
}

fn cmd_run(exp: &ExperimentArgs, seed: Option<u64>, log_signs: bool, out: &OutputArgs) -> anyhow::Result<()> {
    let mut cfg = exp.resolve(Method::Fedheal, seed)?;
    cfg.log_signs |= log_signs;
    let report = run_experiment_with(&cfg, &RunOptions::default())?.report;
    match &out.out {
        Some(p) => report.export(p, out.format.into())?,
        None => {
            let mut w = writer(None)?;
            match out.format {
                Format::Json => report.write_json(&mut w)?,
                Format::Csv => report.write_csv(&mut w)?,
            }
            w.flush()?;
        }
    }
    eprintln!("{}", summary_line(&report));
    Ok(())
}

fn cmd_compare(
    exp: &ExperimentArgs,
    seeds: &str,
    methods: &str,
    reports_dir: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let seeds = parse_seeds(seeds)?;
    let methods: Vec<Method> = parse_list("methods", methods)?;
    let base = exp.resolve(Method::Fedheal, None)?;
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .flat_map(|&m| {
            let base = &base;
            seeds.iter().map(move |&s| ExperimentConfig {
                method: m,
                ..base.with_seed(s)
            })
        })
        .collect();
    let reports = run_grid(&configs)?;

    if let Some(dir) = reports_dir {
        fs::create_dir_all(dir)?;
        for r in &reports {
            let name = format!("{}-seed{}.json", r.config.method, r.config.seed);
            r.export(dir.join(name), ExportFormat::Json)?;
        }
    }
    let mut w = writer(out)?;
    writeln!(w, "method,seed,avg,std")?;
    for r in &reports {
        writeln!(
            w,
            "{},{},{},{}",
            r.config.method,
            r.config.seed,
            fmt_opt(r.final_avg),
            fmt_opt(r.final_std)
        )?;
    }
    w.flush()?;
    for m in methods {
        let of = |f: fn(&ExperimentReport) -> Option<f64>| {
            median(reports.iter().filter(|r| r.config.method == m).filter_map(f).collect())
        };
        eprintln!(
            "{m}: median AVG {} median STD {} over {} seeds",
            fmt_opt(of(|r| r.final_avg)),
            fmt_opt(of(|r| r.final_std)),
            seeds.len()
        );
    }
    Ok(())
}

fn cmd_sweep(exp: &ExperimentArgs, seeds: &str, taus: &str, betas: &str, out: Option<&Path>) -> anyhow::Result<()> {
    let seeds = parse_seeds(seeds)?;
    let taus: Vec<f64> = parse_list("taus", taus)?;
    let betas: Vec<f64> = parse_list("betas", betas)?;
    let base = exp.resolve(Method::Fedheal, None)?;
    let mut configs = Vec::new();
    for &tau in &taus {
        for &beta in &betas {
            for &s in &seeds {
                let c = ExperimentConfig {
                    tau,
                    beta,
                    ..base.with_seed(s)
                };
                c.validate()?;
                configs.push(c);
            }
        }
    }
    let reports = run_grid(&configs)?;
    let mut w = writer(out)?;
    writeln!(w, "method,tau,beta,seed,avg,std")?;
    for r in &reports {
        let c = &r.config;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.method,
            c.tau,
            c.beta,
            c.seed,
            fmt_opt(r.final_avg),
            fmt_opt(r.final_std)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_puc_report(
    exp: &ExperimentArgs,
    seed: Option<u64>,
    client: usize,
    window: usize,
    out: &OutputArgs,
) -> anyhow::Result<()> {
    let mut cfg = exp.resolve(Method::FedavgProportional, seed)?;
    cfg.log_signs = true;
    let outcome = run_experiment_with(&cfg, &RunOptions::default())?;
    let h = puc_report(outcome.sign_log.as_ref(), client, window)?;
    let null = h.null_bins();
    let total = h.total().max(1) as f64;
    let mut w = writer(out.out.as_deref())?;
    match out.format {
        Format::Json => {
            let doc = serde_json::json!({
                "histogram": h,
                "null_bins": null,
                "mean_consistency": h.mean_consistency(),
                "null_mean_consistency": fedheal::puc::null_mean(window),
            });
            serde_json::to_writer_pretty(&mut w, &doc)?;
            writeln!(w)?;
        }
        Format::Csv => {
            writeln!(w, "bin,lower,upper,count,fraction,null_fraction")?;
            for (k, (&count, p0)) in h.bins.iter().zip(&null).enumerate() {
                writeln!(
                    w,
                    "{k},{:.1},{:.1},{count},{:.6},{p0:.6e}",
                    k as f64 / NUM_BINS as f64,
                    (k + 1) as f64 / NUM_BINS as f64,
                    count as f64 / total,
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => bail!(fedheal::Error::config("FEDHEAL_THREADS", "positive integer")),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            bail!(fedheal::Error::config("threads", "threads >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Run {
            exp,
            seed,
            log_signs,
            out,
        } => cmd_run(exp, *seed, *log_signs, out),
        Command::Compare {
            exp,
            seed,
            methods,
            reports_dir,
            out,
        } => cmd_compare(exp, seed, methods, reports_dir.as_deref(), out.as_deref()),
        Command::Sweep {
            exp,
            seed,
            taus,
            betas,
            out,
        } => cmd_sweep(exp, seed, taus, betas, out.as_deref()),
        Command::PucReport {
            exp,
            seed,
            client,
            window,
            out,
        } => cmd_puc_report(exp, *seed, *client, *window, out),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<fedheal::Error>() {
        e.kind()
    } else if err.downcast_ref::<io::Error>().is_some() {
        "io"
    } else if err.downcast_ref::<std::num::ParseIntError>().is_some() {
        "invalid_argument"
    } else {
        "internal"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "kind": error_kind(&err), "message": format!("{err:#}") });
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
