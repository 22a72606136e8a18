use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lain_core::experiments::{
    chain_scenarios, compare, delay_monotone, emit_plot_data, load_table, policy_quality, run_matrix_with,
    six_uav_train_config, train_six_uav, ExperimentConfig, MetricsTable,
};
use lain_core::instances::six_uav_snapshots;
use lain_core::learner::{Greedy, TrainedPolicies};
use lain_core::{Error, Result};

const TEMPLATE: &str = include_str!("../../../configs/template.toml");

#[derive(Parser)]
#[command(name = "lain", version, about = "UAV relay network routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the algorithm matrix, then write the figure data.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Replace the configured seeds (repeatable).
        #[arg(short, long)]
        seed: Vec<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Override the number of training episodes.
        #[arg(long)]
        episodes: Option<u64>,
        /// Runs trained in parallel.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score SHERB-MADDQN against the exact oracle on the six-UAV instance.
    OracleEval {
        /// Evaluate a saved policy instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the scripted consensus and membership scenarios.
    ChainTest {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the combined tables and figure data from a finished run.
    Export {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print a commented configuration template.
    Template,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            episodes,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(n) = episodes {
                cfg.train.episodes = n;
            }
            cfg.validate()?;
            let table = run_matrix_with(&cfg, jobs, |r| {
                let status = if r.completed { "done" } else { "FAILED" };
                eprintln!("{} seed {}: {status} {}", r.algorithm, r.seed, r.detail);
            })?;
            for p in emit_plot_data(&table, &cfg.out_dir)? {
                eprintln!("wrote {}", p.display());
            }
            print_summary(&table);
            let failed: Vec<String> = table
                .failed()
                .map(|r| format!("{} seed {}: {}", r.algorithm, r.seed, r.detail))
                .collect();
            if failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{} run(s) failed:", failed.len());
                for f in failed {
                    eprintln!("  {f}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::OracleEval {
            checkpoint,
            seed,
            episodes,
            out,
        } => oracle_eval(checkpoint.as_deref(), &seed, episodes, &out),
        Command::ChainTest { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let report = chain_scenarios(&cfg)?;
            println!(
                "{:<22} {:>4} {:>6} {:>8} {:>6} {:>5} {:>8} {:>10}",
                "scenario", "n", "rounds", "success", "views", "revok", "latency", "delay_d_s"
            );
            for s in &report.scenarios {
                println!(
                    "{:<22} {:>4} {:>6} {:>8.3} {:>6} {:>5} {:>8} {:>10.5}",
                    s.name,
                    s.replicas,
                    s.rounds,
                    s.success_rate,
                    s.view_changes,
                    s.revocations,
                    s.revocation_latency_steps.map_or("-".into(), |l| format!("{l:.1}")),
                    s.delay_delta_s
                );
            }
            let dir = out.unwrap_or(cfg.out_dir);
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            report.write_csv(&dir.join("chain_report.csv"))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let table = load_table(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            table.write_csvs(&dir)?;
            for p in emit_plot_data(&table, &dir)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Template => {
            print!("{TEMPLATE}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn oracle_eval(checkpoint: Option<&Path>, seeds: &[u64], episodes: Option<u64>, out: &Path) -> Result<ExitCode> {
    let snapshots = six_uav_snapshots()?;
    let mut tc = six_uav_train_config();
    if let Some(n) = episodes {
        tc.episodes = n;
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut rows = vec!["seed,snapshot,demands,policy_delay_s,oracle_delay_s,gap,optimal_demands".to_string()];
    for &seed in seeds {
        let policies = match checkpoint {
            Some(p) => TrainedPolicies::load(p)?,
            None => train_six_uav(&tc, seed)?,
        };
        let r = policy_quality(&mut Greedy(&policies), &snapshots)?;
        for (i, s) in r.scores.iter().enumerate() {
            rows.push(format!(
                "{seed},{i},{},{},{},{},{}",
                s.demands, s.policy_delay_s, s.oracle_delay_s, s.gap, s.optimal_demands
            ));
        }
        println!(
            "seed {seed}: worst gap {:.4}, mean gap {:.4}, optimal paths {:.1}%",
            r.worst_gap(),
            r.mean_gap(),
            100.0 * r.optimal_fraction()
        );
        if checkpoint.is_some() {
            break;
        }
    }
    let path = out.join("oracle_eval.csv");
    std::fs::write(&path, rows.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
    Ok(ExitCode::SUCCESS)
}

fn print_summary(table: &MetricsTable) {
    let reference = "SHERB-MADDQN";
    for c in compare(table, reference) {
        println!(
            "{reference} vs {}: lower delay on {}/{} seeds (ties {}), sign-test p = {:.4}, mean reduction {:.1}%",
            c.other,
            c.test.wins,
            c.pairs.len(),
            c.test.ties,
            c.test.p_value,
            100.0 * c.mean_reduction
        );
    }
    for a in table.algorithms() {
        println!("{a}: delay non-decreasing in load: {}", delay_monotone(table, &a));
    }
}
