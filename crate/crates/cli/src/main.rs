use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use rehab_cli::commands::{self, RunArgs};
use rehab_cli::service::{self, ServeConfig};
use rehab_core::TaskKind;

#[derive(Parser)]
#[command(name = "rehab", version, about = "Rehab cobot simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scripted session and write its files under OUT/<session-id>.
    Run {
        #[arg(long)]
        task: TaskKind,
        /// Profile JSON file, or a built-in name (permissive, limited, guarded).
        #[arg(long)]
        profile: String,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep training for this many 5-minute intervals after convergence.
        #[arg(long)]
        intervals: Option<u32>,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
    /// Score a policy against an expert trajectory.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        band_radius: Option<f64>,
    },
    /// Process a manifest of raw sEMG channels into %MVIC tables.
    EmgReport {
        #[arg(long)]
        manifest: PathBuf,
        /// Print the full report as JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Write synthetic sEMG channels and a manifest for a task.
    EmgSimulate {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 3)]
        reps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP control API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        data: PathBuf,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Run {
            task,
            profile,
            stage,
            seed,
            out,
            intervals,
            amplitude,
        } => {
            let summary = commands::run(&RunArgs {
                task,
                profile,
                stage,
                seed,
                out,
                intervals,
                amplitude,
            })?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(summary.exit_code())
        }
        Cmd::Evaluate {
            policy,
            expert,
            band_radius,
        } => {
            let ev = commands::evaluate_files(&policy, &expert, band_radius)?;
            println!("{}", serde_json::to_string(&ev)?);
            Ok(0)
        }
        Cmd::EmgReport { manifest, json } => {
            let set = commands::emg_report(&manifest)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&set)?);
            } else {
                print!("{}", set.to_csv());
                if let Some(c) = &set.comparison {
                    eprintln!(
                        "cobot - specialist: {:.2} ± {:.2} %MVIC over {} muscles",
                        c.mean_increment,
                        c.sd_increment,
                        c.rows.len()
                    );
                }
            }
            Ok(0)
        }
        Cmd::EmgSimulate {
            task,
            profile,
            reps,
            seed,
            out,
        } => {
            let p = commands::load_profile(&profile)?;
            let manifest = commands::emg_simulate(task, &p, reps, seed, &out)?;
            println!("{}", manifest.display());
            Ok(0)
        }
        Cmd::Serve { bind, data, speed } => {
            if speed.is_nan() || speed <= 0.0 {
                anyhow::bail!("--speed must be positive");
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(
                bind,
                ServeConfig {
                    data_dir: data,
                    speed,
                },
            ))?;
            Ok(0)
        }
    }
}
