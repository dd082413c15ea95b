//! Batch entry point: parse a run configuration, execute one named
//! experiment, and emit a CSV of result rows plus a JSON summary.
//!
//! Exit codes: 0 when every checked row passed, 1 when some check
//! failed, 2 for configuration/usage errors, 3 for runtime model errors.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fibermc::config::RunConfig;
use fibermc::error::Error;
use fibermc::{experiments, report};

#[derive(Parser)]
#[command(
    name = "fibermc",
    about = "Monte Carlo engine for symmetric diffusions on principal fiber bundles",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Print machine-readable output where applicable.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// List the available experiments.
    List,
    /// Run one experiment and write result files.
    Run {
        /// TOML run configuration; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        experiment: Option<String>,
        /// Built-in model: A, B or C.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        /// Horizon t_b (t_a defaults to 0).
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory for results.csv / results.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn list(json: bool) {
    if json {
        let list: Vec<serde_json::Value> = experiments::experiment_descriptions()
            .into_iter()
            .map(|(name, desc)| serde_json::json!({"name": name, "description": desc}))
            .collect();
        println!("{}", serde_json::to_string_pretty(&list).unwrap());
    } else {
        for (name, desc) in experiments::experiment_descriptions() {
            println!("{name:<22} {desc}");
        }
    }
}

/// Environment overrides with the documented FIBERMC_ prefix.
fn apply_env(cfg: &mut RunConfig) -> Result<(), Error> {
    if let Ok(v) = std::env::var("FIBERMC_SEED") {
        cfg.run.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("FIBERMC_SEED: bad value '{v}'")))?;
    }
    if let Ok(v) = std::env::var("FIBERMC_WORKERS") {
        cfg.run.workers = v
            .parse()
            .map_err(|_| Error::Config(format!("FIBERMC_WORKERS: bad value '{v}'")))?;
    }
    if let Ok(v) = std::env::var("FIBERMC_OUT") {
        cfg.run.out_dir = v;
    }
    Ok(())
}

fn run_command(cli_json: bool, cmd: Command) -> Result<bool, Error> {
    let Command::Run {
        config,
        experiment,
        model,
        paths,
        dt,
        t,
        seed,
        workers,
        out,
    } = cmd
    else {
        list(cli_json);
        return Ok(true);
    };

    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    if let Some(e) = experiment {
        cfg.run.experiment = e;
    }
    if let Some(m) = model {
        cfg.run.model = m;
    }
    if let Some(p) = paths {
        cfg.run.paths = p;
    }
    if let Some(v) = dt {
        cfg.run.dt = v;
    }
    if let Some(v) = t {
        cfg.run.t = v;
    }
    if let Some(v) = seed {
        cfg.run.seed = v;
    }
    if let Some(v) = workers {
        cfg.run.workers = v;
    }
    if let Some(v) = out {
        cfg.run.out_dir = v.display().to_string();
    }
    apply_env(&mut cfg)?;
    cfg.validate()?;

    let rows = experiments::run(&cfg)?;

    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let json_path = out_dir.join("results.json");
    let mut csv = std::fs::File::create(&csv_path)?;
    report::write_csv(&mut csv, &rows)?;
    let mut js = std::fs::File::create(&json_path)?;
    report::write_json(&mut js, &rows)?;

    let all_pass = rows.iter().all(|r| r.pass);
    if cli_json {
        let mut stdout = std::io::stdout().lock();
        report::write_json(&mut stdout, &rows)?;
    } else {
        println!(
            "{} on model {} — {} checks, {}",
            cfg.run.experiment,
            cfg.run.model,
            rows.len(),
            if all_pass { "all PASS" } else { "FAILURES" }
        );
        for r in &rows {
            println!(
                "  [{}] {:<45} value {:>13.6e}  tol {:>10.3e}{}",
                if r.pass { "PASS" } else { "FAIL" },
                r.quantity,
                r.value,
                r.tolerance,
                if r.stderr > 0.0 {
                    format!("  σ {:.3e}", r.stderr)
                } else {
                    String::new()
                }
            );
        }
        println!("results: {} / {}", csv_path.display(), json_path.display());
    }
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(cmd) = cli.command else {
        list(cli.json);
        return ExitCode::SUCCESS;
    };
    if matches!(cmd, Command::List) {
        list(cli.json);
        return ExitCode::SUCCESS;
    }
    match run_command(cli.json, cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(3)
        }
    }
}
