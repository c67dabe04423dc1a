//! Experiment runner.
//!
//! Usage: `amp-evolve <mode> --config <path> [--out <dir>] [--seed <u64>]
//! [--jobs <k>] [--emit-canonical]`.
//!
//! Exit codes: 0 all checks passed; 1 a verification check failed;
//! 2 usage or config parse error; 3 semantic config error; 4 numerical
//! failure (diverged run).

mod artifacts;
mod config;
mod modes;

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use amp_evolve_core::error::Error as CoreError;

use artifacts::{write_json_atomic, Manifest};
use config::{config_hash, emit_canonical, parse_config, ConfigError, Mode};

#[derive(Parser, Debug)]
#[command(name = "amp-evolve", version, about = "AMP / state-evolution experiment runner")]
struct Cli {
    /// Experiment mode (must match the config's mode)
    #[arg(value_enum)]
    mode: Mode,

    /// Path to the JSON config
    #[arg(long)]
    config: PathBuf,

    /// Output directory (overrides the config's `out`)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Base seed override
    #[arg(long)]
    seed: Option<u64>,

    /// Parallel replication cap
    #[arg(long, env = "AMP_EVOLVE_JOBS")]
    jobs: Option<usize>,

    /// Print the canonical form of the parsed config and exit
    #[arg(long)]
    emit_canonical: bool,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", cli.config.display());
            return 2;
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e @ ConfigError::Parse { .. }) => {
            eprintln!("{e}");
            return 2;
        }
        Err(e @ ConfigError::Semantic(_)) => {
            eprintln!("{e}");
            return 3;
        }
    };
    if cfg.mode != cli.mode {
        eprintln!(
            "mode mismatch: command line says {:?}, config says {:?}",
            cli.mode, cfg.mode
        );
        return 2;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.emit_canonical {
        println!("{}", emit_canonical(&cfg));
        return 0;
    }

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            eprintln!("note: thread pool already initialized: {e}");
        }
    }

    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("amp-evolve-out"));

    let start = Instant::now();
    let mut manifest = Manifest::new(
        format!("{:?}", cfg.mode),
        config_hash(&cfg),
        cfg.seed,
    );
    manifest.resolved_size = cfg.size.and_then(|s| s.resolve().ok());

    let report = match modes::run_mode(&cfg, &out, &mut manifest) {
        Ok(o) => o,
        Err(CoreError::NumericalFailure { context, iteration }) => {
            eprintln!(
                "numerical failure{}: {context}",
                iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default()
            );
            manifest.wall_time_ms = start.elapsed().as_millis();
            let _ = write_json_atomic(&out, "manifest.json", &manifest);
            return 4;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };

    manifest.wall_time_ms = start.elapsed().as_millis();
    let report_path = match write_json_atomic(&out, "verification_report.json", &report) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot write report: {e}");
            return 3;
        }
    };
    manifest.record(&report_path);
    if let Err(e) = write_json_atomic(&out, "manifest.json", &manifest) {
        eprintln!("cannot write manifest: {e}");
        return 3;
    }

    let failed = report.failed();
    for c in &report.checks {
        println!(
            "{} {}: statistic {:.6e}, threshold {:.6e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.statistic,
            c.threshold
        );
    }
    if failed.is_empty() {
        0
    } else {
        eprintln!("{} check(s) failed", failed.len());
        1
    }
}
