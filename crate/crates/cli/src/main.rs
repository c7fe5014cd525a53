use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsms_core::config::SimConfig;
use nsms_core::diagnostics::{check_global_bounds, poincare_constant};
use nsms_core::driver::{check_suite, compare_reference, run_simulation, sweep_epsilon};
use nsms_core::Result;

/// Artificial-compressibility Navier-Stokes-Maxwell-Stefan solver.
#[derive(Parser)]
#[command(name = "nsms", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    config: PathBuf,
    /// Override a config key, e.g. `--set scheme.eps=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write the step ledger as CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Ledger path; defaults to `<output.dir>/ledger.csv`, else stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Artificial-compressibility runs for several eps against one incompressible reference.
    SweepEps {
        #[command(flatten)]
        common: Common,
        /// Strictly decreasing eps values, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        eps: Vec<f64>,
    },
    /// Invariant and property suite on a small version of the config.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the run at the configured eps with the incompressible reference.
    CompareRef {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<SimConfig> {
    let mut cfg = SimConfig::parse(&fs::read_to_string(&common.config)?)?;
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn verdict(name: &str, passed: bool, detail: &str) -> bool {
    eprintln!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Run { common, csv } => {
            let cfg = load(&common)?;
            let out = run_simulation(&cfg)?;
            let path = csv.or_else(|| cfg.output_dir.as_ref().map(|d| d.join("ledger.csv")));
            write_or_print(path.as_deref(), &out.ledger.to_csv())?;
            let bounds = check_global_bounds(&out.ledger, poincare_constant(&cfg.grid()?)?)?;
            let energy = verdict(
                "energy bound",
                bounds.energy.passed,
                &format!("margin {:e}, first violation {:?}", bounds.energy.margin, bounds.energy.first_violation),
            );
            let entropy = verdict(
                "entropy bound",
                bounds.entropy.passed,
                &format!("margin {:e}, first violation {:?}", bounds.entropy.margin, bounds.entropy.first_violation),
            );
            let clamps = out.ledger.clamp_count();
            let positive = verdict("positivity", clamps == 0, &format!("{clamps} clamped rows"));
            Ok(energy && entropy && positive)
        }
        Command::SweepEps { common, eps } => {
            let cfg = load(&common)?;
            let result = sweep_epsilon(&cfg, &eps)?;
            print!("{}", result.to_table());
            eprintln!("reference div_l2l2 {:e}", result.reference_div_l2l2);
            eprintln!("observed velocity rates {:?}", result.velocity_rates());
            let div = verdict("div u monotone", result.div_monotone(), "strict decrease along eps");
            let vel = verdict("u - u_ref monotone", result.velocity_monotone(), "strict decrease along eps");
            Ok(div && vel)
        }
        Command::Check { common } => {
            let cfg = load(&common)?;
            let mut all = true;
            for c in check_suite(&cfg)? {
                all &= verdict(c.name, c.passed, &c.detail);
            }
            Ok(all)
        }
        Command::CompareRef { common } => {
            let cfg = load(&common)?;
            let (row, ref_div) = compare_reference(&cfg)?;
            println!("eps,div_l2l2,velocity_error,density_error,reference_div_l2l2");
            println!("{},{},{},{},{}", row.eps, row.div_l2l2, row.velocity_error, row.density_error, ref_div);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
