use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use irs_alloc::ao::Instance;
use irs_alloc::harness::{self, run_schemes, SweepAxis, SweepSpec};
use irs_alloc::{ChannelSet, CodewordSelection, SchemeKind, ScenarioConfig};

#[derive(Parser)]
#[command(name = "irs-alloc", version, about = "Codebook-based IRS resource allocation for eMBB/URLLC downlinks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Scenario JSON; omitted fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ScenarioConfig> {
        let cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ScenarioConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one channel realization with the selected schemes.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Channel seed; defaults to the config's `rng_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated schemes, or `all`.
        #[arg(long, default_value = "proposed")]
        schemes: String,
        /// Read the realization from a CSV written by `dump-channels`.
        #[arg(long)]
        channels: Option<PathBuf>,
        /// Directory for the solution JSON, selection, SINR and codebook CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo sweep over the URLLC packet size or the power budget.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// `b_req` (bits) or `p_max` (dBm).
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "all")]
        schemes: String,
        #[arg(long, default_value_t = 30)]
        seeds: usize,
        #[arg(long)]
        master_seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Output file stem; defaults to the axis name.
        #[arg(long)]
        stem: Option<String>,
        /// Write zero wall times so reruns produce identical files.
        #[arg(long)]
        zero_timing: bool,
    },
    /// Compare the AO against exhaustive codeword search (small instances only).
    OracleCheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        master_seed: u64,
    },
    /// Quick invariant checks; exits nonzero on any violation.
    Selftest {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        master_seed: u64,
    },
    /// Write one channel realization as CSV.
    DumpChannels {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn parse_schemes(s: &str) -> Result<Vec<SchemeKind>> {
    if s == "all" {
        return Ok(SchemeKind::ALL.to_vec());
    }
    s.split(',').map(|p| Ok(p.trim().parse::<SchemeKind>()?)).collect()
}

fn seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| master.wrapping_add(i)).collect()
}

fn run(cfg: &ScenarioConfig, seed: u64, schemes: &[SchemeKind], channels: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let inst = match channels {
        Some(p) => Instance::from_channels(cfg, ChannelSet::read_csv(File::open(p)?)?, seed)?,
        None => Instance::prepare(cfg, seed)?,
    };
    let sols = run_schemes(&inst, schemes)?;
    println!("{:<12} {:>12} {:>7} {:>9} {:>10}", "scheme", "rate", "outage", "feasible", "wall_ms");
    for s in &sols {
        println!(
            "{:<12} {:>12.6} {:>7} {:>9} {:>10.1}",
            s.scheme.name(),
            s.objective,
            s.outage,
            s.feasible,
            s.wall_ms
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        inst.codebook.write_csv(File::create(dir.join("codebook.csv"))?)?;
        for s in &sols {
            let name = s.scheme.name();
            std::fs::write(dir.join(format!("{name}.json")), s.to_json()?)?;
            s.write_sinr_csv(File::create(dir.join(format!("{name}_sinr.csv")))?)?;
            if let [chosen] = s.selections.as_slice() {
                CodewordSelection::from_indices(chosen, inst.num_words())?
                    .write_csv(File::create(dir.join(format!("{name}_selection.csv")))?)?;
            }
        }
        println!("wrote results to {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            schemes,
            channels,
            out,
        } => {
            let cfg = config.load()?;
            run(
                &cfg,
                seed.unwrap_or(cfg.rng_seed),
                &parse_schemes(&schemes)?,
                channels.as_deref(),
                out.as_deref(),
            )?;
        }
        Command::Sweep {
            config,
            axis,
            values,
            schemes,
            seeds,
            master_seed,
            out,
            stem,
            zero_timing,
        } => {
            let cfg = config.load()?;
            let spec = SweepSpec {
                axis,
                values,
                schemes: parse_schemes(&schemes)?,
                num_seeds: seeds,
                master_seed,
                zero_timing,
            };
            let table = harness::run_sweep(&cfg, &spec)?;
            for row in harness::aggregate(&table) {
                println!(
                    "{}={:<8} {:<12} mean {:.4} ± {:.4}  outage {:.2}",
                    axis.name(),
                    row.axis_value,
                    row.scheme.name(),
                    row.mean,
                    row.ci95,
                    row.outage_rate
                );
            }
            for (v, seed, msg) in &table.failures {
                eprintln!("failed: {}={v} seed {seed}: {msg}", axis.name());
            }
            let (long, summary) = harness::emit_results(&table, &out, stem.as_deref().unwrap_or(axis.name()))?;
            println!("wrote {} and {}", long.display(), summary.display());
        }
        Command::OracleCheck {
            config,
            seeds: n,
            master_seed,
        } => {
            let cfg = config.load()?;
            let rows = harness::oracle_check(&cfg, &seeds(master_seed, n))?;
            let mut ok = true;
            for r in &rows {
                let holds = r.bracket_holds(1e-6);
                ok &= holds;
                println!(
                    "seed {:>4}: init {:.6}  ao {:.6}  oracle {:.6} ({} candidates)  gap {:.3}%  {}",
                    r.seed,
                    r.init_objective,
                    r.ao_objective,
                    r.oracle_objective,
                    r.candidates,
                    100.0 * r.relative_gap(),
                    if holds { "ok" } else { "BRACKET VIOLATED" }
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Selftest {
            config,
            seeds: n,
            master_seed,
        } => {
            let cfg = config.load()?;
            let checks = harness::selftest(&cfg, &seeds(master_seed, n))?;
            for c in &checks {
                println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpChannels { config, seed, out } => {
            let cfg = config.load()?;
            let inst = Instance::prepare(&cfg, seed.unwrap_or(cfg.rng_seed))?;
            inst.channels.write_csv(File::create(&out)?)?;
            println!("wrote {}", out.display());
        }
        Command::ShowConfig { config } => {
            println!("{}", serde_json::to_string_pretty(&config.load()?)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
