use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modecons::bounds::GainPreset;
use modecons::scenario::{self, exit_code_for, Overrides};
use modecons::Error;

#[derive(Parser)]
#[command(name = "modecons", version, about = "Simulate distributed mode consensus over dynamic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its summary, time series and manifest.
    Run(Common),
    /// Print the convergence bounds and gain/spectral checks.
    Bounds(Common),
    /// Validate a config and check its event dwell times.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<GainPreset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
}

fn parse_preset(s: &str) -> Result<GainPreset, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown preset `{s}` (paper-exact, paper-strict, desk)"))
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(err) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (Command::Run(c) | Command::Bounds(c) | Command::Validate(c)) = &cli.command;
    let mut cfg = match scenario::load_config(&c.config) {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e),
    };
    Overrides {
        out_dir: c.out_dir.clone(),
        preset: c.preset,
        seed: c.seed,
        dt: c.dt,
        horizon: c.horizon,
    }
    .apply(&mut cfg);

    match &cli.command {
        Command::Run(_) => {
            let out = cfg.out_dir.clone().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
            match scenario::run(&cfg, &out) {
                Ok(summary) => {
                    println!("mode: {} (frequency {})", summary.mode, summary.mode_frequency);
                    for v in &summary.verdicts {
                        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.check, v.detail);
                    }
                    println!("artifacts: {}", out.display());
                    ExitCode::from(summary.exit_code() as u8)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Bounds(_) => match scenario::bounds_only(&cfg) {
            Ok(report) => {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Validate(_) => match scenario::validate(&cfg) {
            Ok(dwell) => {
                println!("config ok");
                for g in &dwell.gaps {
                    println!(
                        "{} gap {:.6} s between t={} and t={} (required {:.6} s)",
                        if g.pass { "PASS" } else { "FAIL" },
                        g.gap,
                        g.from,
                        g.to,
                        dwell.required
                    );
                }
                if dwell.pass() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(&e),
        },
    }
}
