use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntk_lab::compare::compare_run;
use ntk_lab::error::CliError;
use ntk_lab::{run_config_file, run_preset, seed_from_env, RunOptions, SCHEMA};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ntk-lab", version, about = "Gradient-flow and neural tangent kernel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a shipped preset.
    Run {
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for grid cells (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        preset: Option<String>,
        /// List the shipped presets and exit.
        #[arg(long)]
        list_presets: bool,
    },
    /// Compare net, initial-NTK, final-NTK and integrating-factor predictions.
    Compare { rundir: PathBuf },
    /// Print the config JSON schema.
    Schema,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            preset,
            list_presets,
        } => {
            if list_presets {
                for name in ntk_lab::presets::names() {
                    println!("{name}");
                }
                return Ok(());
            }
            if jobs == Some(0) {
                return Err(CliError::schema("jobs", "--jobs must be at least 1"));
            }
            let opts = RunOptions {
                out,
                jobs,
                seed: seed_from_env()?,
            };
            let (dir, manifest) = match (config, preset) {
                (Some(path), None) => run_config_file(&path, &opts)?,
                (None, Some(name)) => run_preset(&name, &opts)?,
                _ => return Err(CliError::schema("", "give exactly one of a config path and --preset")),
            };
            println!(
                "{}",
                json!({
                    "run_id": manifest.run_id,
                    "out": dir.display().to_string(),
                    "files": manifest.files.len(),
                    "wall_time_seconds": manifest.wall_time_seconds,
                })
            );
        }
        Command::Compare { rundir } => {
            let reports = compare_run(&rundir)?;
            let cells: Vec<_> = reports.iter().map(|(name, r)| json!({ "cell": name, "report": r })).collect();
            println!("{}", serde_json::to_string_pretty(&cells).expect("plain data"));
        }
        Command::Schema => print!("{SCHEMA}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
