//! Operator entry points: run simulations, evaluate the closed-form bounds,
//! build bootstrap fixtures, and aggregate multi-seed batches into
//! plot-ready tables. All outputs are written to a temporary file and
//! renamed into place, so a crash never leaves a partial file behind.

use crate::analysis::{
    theorem_bound_with, AnalysisError, BoundReport, TailKernel, TheoremParams,
    DEFAULT_SPLIT_WEIGHTS,
};
use crate::sim::{self, Metrics, ScenarioConfig};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] sim::config::ConfigError),
    #[error("{0}")]
    Sim(#[from] sim::SimError),
    #[error("{0}")]
    Analysis(#[from] AnalysisError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "peercensus",
    about = "Deterministic simulator and tail-bound analyzer for a proof-of-work gated dynamic-membership agreement stack"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one scenario and write metrics.csv plus summary.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's duration, in ticks.
        #[arg(long)]
        duration: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the failure-probability bound and write report.json.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (the report also prints to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a migration fixture: synthesize (or load) a chain, cut it, and
    /// write the initial state plus the re-commit suffix.
    Bootstrap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run many seeds of one scenario and aggregate the results.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Number of consecutive seeds to run (starting at the config's).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Write-then-rename so observers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn load_scenario(
    path: &Path,
    seed: Option<u64>,
    duration: Option<u64>,
) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(duration) = duration {
        cfg.duration_ticks = duration;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_simulate(
    config: &Path,
    seed: Option<u64>,
    duration: Option<u64>,
    out: &Path,
) -> Result<Metrics, CliError> {
    let cfg = load_scenario(config, seed, duration)?;
    let metrics = sim::run_scenario(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    metrics.write_csv(&mut csv)?;
    write_atomic(&out.join("metrics.csv"), &csv)?;
    write_atomic(
        &out.join("summary.json"),
        format!("{}\n", metrics.summary_json()).as_bytes(),
    )?;
    Ok(metrics)
}

/// The `[bound]` table of an analysis config.
#[derive(Debug, Deserialize)]
struct BoundSection {
    resources: f64,
    voters: f64,
    chain_length: f64,
    attacker_fraction: f64,
    rho: f64,
    sigma: f64,
    /// Defaults to 1/2 minus the attacker resource ratio.
    epsilon: Option<f64>,
    /// Fractions of epsilon for the resource, block, and voter deviations.
    split: Option<[f64; 3]>,
    tick_seconds: Option<f64>,
    expected_block_ratio: Option<f64>,
    voter_ratio: Option<f64>,
    /// "quadratic" (default) or "exact".
    kernel: Option<String>,
}

#[derive(Debug, Deserialize)]
struct BoundFile {
    bound: BoundSection,
}

pub fn load_bound_params(path: &Path) -> Result<(TheoremParams, TailKernel), CliError> {
    let text = std::fs::read_to_string(path)?;
    let file: BoundFile =
        toml::from_str(&text).map_err(|e| CliError::Other(format!("config parse: {e}")))?;
    let b = file.bound;
    let ratio = b.attacker_fraction / (1.0 - b.attacker_fraction);
    let params = TheoremParams {
        resources: b.resources,
        voters: b.voters,
        chain_length: b.chain_length,
        attacker_fraction: b.attacker_fraction,
        rho: b.rho,
        sigma: b.sigma,
        epsilon: b.epsilon.unwrap_or(0.5 - ratio),
        split: b.split.unwrap_or(DEFAULT_SPLIT_WEIGHTS),
        expected_block_ratio: b.expected_block_ratio,
        voter_ratio: b.voter_ratio,
        tick_seconds: b.tick_seconds.unwrap_or(1.0),
    };
    let kernel = match b.kernel.as_deref() {
        None | Some("quadratic") => TailKernel::Quadratic,
        Some("exact") => TailKernel::Exact,
        Some(other) => {
            return Err(CliError::Other(format!(
                "unknown kernel {other:?} (expected \"quadratic\" or \"exact\")"
            )))
        }
    };
    Ok((params, kernel))
}

pub fn render_report(report: &BoundReport) -> String {
    let mut s = String::new();
    s.push_str("factor            deviation     bound\n");
    s.push_str(&format!(
        "online resources  {:<12.6} {:.6e}\n",
        report.deviations[0], report.resource_term.p
    ));
    s.push_str(&format!(
        "minted blocks     {:<12.6} {:.6e}\n",
        report.deviations[1], report.block_term.p
    ));
    s.push_str(&format!(
        "online voters     {:<12.6} {:.6e}\n",
        report.deviations[2], report.voter_term.p
    ));
    s.push_str(&format!("failure probability per tick  {:.6e}\n", report.total));
    s.push_str(&format!(
        "secure probability            {:.17}\n",
        report.secure_probability
    ));
    s.push_str(&format!(
        "expected time between failures  {:.3e} seconds ({:.3e} years)\n",
        report.mtbf_seconds, report.mtbf_years
    ));
    if report.vacuous {
        s.push_str("NOTE: bound is vacuous (no information at these parameters)\n");
    }
    if report.premise_violated {
        s.push_str("NOTE: expected resource ratio exceeds 1/2 - epsilon; theorem premise fails\n");
    }
    s.push_str(&format!(
        "(exact-kernel composition for reference: {:.6e})\n",
        report.exact_total
    ));
    s
}

pub fn run_analyze(config: &Path, out: Option<&Path>) -> Result<BoundReport, CliError> {
    let (params, kernel) = load_bound_params(config)?;
    let report = theorem_bound_with(kernel, &params)?;
    print!("{}", render_report(&report));
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(&out.join("report.json"), format!("{json}\n").as_bytes())?;
    }
    Ok(report)
}

pub fn run_bootstrap(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    use rand::SeedableRng;
    let cfg = load_scenario(config, seed, None)?;
    let b = &cfg.bootstrap;
    let chain = if let Some(file) = &b.chain_file {
        let reader = std::io::BufReader::new(std::fs::File::open(file)?);
        crate::block::Chain::load(reader).map_err(|e| CliError::Other(e.to_string()))?
    } else {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x1d357a11);
        sim::synth_chain(
            b.chain_length,
            cfg.mining.difficulty,
            cfg.genesis_difficulty,
            b.attacker_block_share,
            b.online_window + b.safety_margin,
            b.attacker_window_share.unwrap_or(b.attacker_block_share),
            &mut rng,
        )
        .chain
    };
    let plan = sim::bootstrap_from_chain(
        &chain,
        b.chain_length,
        b.safety_margin,
        b.online_window,
        &|_| true,
    )
    .map_err(sim::SimError::from)?;

    std::fs::create_dir_all(out)?;
    let mut chain_dump = Vec::new();
    chain
        .dump(&mut chain_dump)
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(&out.join("chain.jsonl"), &chain_dump)?;
    let json =
        serde_json::to_string_pretty(&plan).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(&out.join("plan.json"), format!("{json}\n").as_bytes())?;
    Ok(())
}

pub fn run_report(
    config: &Path,
    seeds: u64,
    jobs: usize,
    seed: Option<u64>,
    duration: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let base = load_scenario(config, seed, duration)?;
    let seed0 = base.seed;
    let jobs = jobs.max(1);

    // Fan seeds out over workers; results keyed by seed so the aggregate is
    // independent of scheduling.
    let mut results: Vec<(u64, Metrics)> = Vec::with_capacity(seeds as usize);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..jobs as u64 {
            let base = base.clone();
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                let mut s = seed0 + worker;
                while s < seed0 + seeds {
                    let mut cfg = base.clone();
                    cfg.seed = s;
                    let metrics = sim::run_scenario(cfg).map(|m| (s, m));
                    local.push(metrics);
                    s += jobs as u64;
                }
                local
            }));
        }
        for h in handles {
            for r in h.join().expect("worker panicked") {
                match r {
                    Ok(pair) => results.push(pair),
                    Err(e) => results.push((u64::MAX, err_metrics(&e))),
                }
            }
        }
    });
    if results.iter().any(|(s, _)| *s == u64::MAX) {
        return Err(CliError::Other("one or more runs failed".into()));
    }
    results.sort_by_key(|(s, _)| *s);

    std::fs::create_dir_all(out)?;

    // Per-seed table.
    let mut per_seed = String::from(
        "seed,final_chain_length,committed_ops,secure_violations,attacker_blocks,defender_blocks,\
         view_changes,ledger_conserved,prefix_consistent,conflict_pairs,conflict_pairs_both\n",
    );
    for (s, m) in &results {
        let x = &m.summary;
        per_seed.push_str(&format!(
            "{s},{},{},{},{},{},{},{},{},{},{}\n",
            x.final_chain_length,
            x.committed_ops,
            x.secure_violations,
            x.attacker_blocks,
            x.defender_blocks,
            x.view_changes,
            x.ledger_conserved as u8,
            x.honest_logs_prefix_consistent as u8,
            x.conflict_pairs,
            x.conflict_pairs_both,
        ));
    }
    write_atomic(&out.join("per_seed.csv"), per_seed.as_bytes())?;

    // Mean ratio traces across seeds, tick-aligned.
    let max_rows = results
        .iter()
        .map(|(_, m)| m.rows.len())
        .max()
        .unwrap_or(0);
    let mut mean = String::from("tick,mean_phi_R,mean_phi_I,mean_phi_B,insecure_runs\n");
    for i in 0..max_rows {
        let mut tick = 0;
        let (mut sr, mut si, mut sb) = (0.0f64, 0.0f64, 0.0f64);
        let mut insecure = 0u64;
        let mut n = 0u64;
        for (_, m) in &results {
            if let Some(row) = m.rows.get(i) {
                tick = row.tick;
                sr += finite_or_zero(row.phi_r);
                si += finite_or_zero(row.phi_i);
                sb += finite_or_zero(row.phi_b);
                insecure += (!row.secure) as u64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        mean.push_str(&format!(
            "{tick},{:.6},{:.6},{:.6},{insecure}\n",
            sr / n,
            si / n,
            sb / n
        ));
    }
    write_atomic(&out.join("mean_trace.csv"), mean.as_bytes())?;

    let violations: u64 = results.iter().map(|(_, m)| m.summary.secure_violations).sum();
    let aggregate = serde_json::json!({
        "runs": results.len(),
        "first_seed": seed0,
        "secure_violations_total": violations,
        "runs_with_violations": results.iter().filter(|(_, m)| m.summary.secure_violations > 0).count(),
        "all_ledgers_conserved": results.iter().all(|(_, m)| m.summary.ledger_conserved),
        "all_logs_prefix_consistent": results.iter().all(|(_, m)| m.summary.honest_logs_prefix_consistent),
        "conflict_pairs_total": results.iter().map(|(_, m)| m.summary.conflict_pairs).sum::<u64>(),
        "conflict_pairs_both_committed": results.iter().map(|(_, m)| m.summary.conflict_pairs_both).sum::<u64>(),
    });
    write_atomic(
        &out.join("aggregate.json"),
        format!("{}\n", serde_json::to_string_pretty(&aggregate).expect("json")).as_bytes(),
    )?;
    Ok(())
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

fn err_metrics(_e: &sim::SimError) -> Metrics {
    Metrics::default()
}

/// Dispatch a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = match cli.cmd {
        Command::Simulate {
            config,
            seed,
            duration,
            out,
        } => run_simulate(&config, seed, duration, &out).map(|_| ()),
        Command::Analyze { config, out } => run_analyze(&config, out.as_deref()).map(|_| ()),
        Command::Bootstrap { config, seed, out } => run_bootstrap(&config, seed, &out),
        Command::Report {
            config,
            seeds,
            jobs,
            seed,
            duration,
            out,
        } => run_report(&config, seeds, jobs, seed, duration, &out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
