//! Experiment orchestration for the dvns toolkit: deterministic runs from
//! TOML configurations, verification suites, model export, run inspection,
//! and empirical-measure utilities.
//!
//! Exit codes: 0 all assertions pass, 1 assertion or verification failure,
//! 2 configuration error.

mod config;
mod runner;

use clap::{Parser, Subcommand};
use dvns_core::acceptance;
use dvns_core::galerkin::{build_torus_model, ForcingSpec, GalerkinModel, NoiseSpec};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dvns",
    about = "Spectral stochastic dynamics and large-time statistics toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment configuration.
    Run {
        /// Path to the TOML configuration.
        config: PathBuf,
    },
    /// Shorthand for a torus-model ensemble simulation run.
    Simulate {
        /// Torus truncation wavenumber (sets the retained modes).
        #[arg(long)]
        modes: u32,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        horizon: f64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        noise_amplitude: f64,
        #[arg(long, default_value_t = 0.1)]
        initial_scale: f64,
    },
    /// Run a verification suite; with no suite, list the available ones.
    Verify {
        /// algebraic | dynamics | montecarlo | acceptance
        suite: Option<String>,
        /// Model document substituted into the model-dependent criteria
        /// (loaded without validation, so broken models surface as failures).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build a torus model and write its document.
    ExportModel {
        #[arg(long)]
        max_wavenumber: u32,
        #[arg(long)]
        noise_amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        forcing_amplitude: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a run record and re-verify its artifact hashes.
    Inspect { run_dir: PathBuf },
    /// Empirical-measure utilities over trajectory files.
    Empirical {
        #[command(subcommand)]
        action: EmpiricalAction,
    },
}

#[derive(Subcommand)]
enum EmpiricalAction {
    /// Occupation measure of a trajectory at time t.
    Occupation {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed empirical measure (forward windows, or backward-padded).
    Window {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        window: f64,
        #[arg(long, default_value_t = false)]
        backward: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Periodized empirical measure over wrapped windows.
    Periodize {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        window: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dual-Lipschitz distance between two measure files.
    Distance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// state | window-sup | window-weighted
        #[arg(long)]
        metric: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => match runner::run(&config) {
            Ok((record, out_dir)) => {
                for a in &record.assertions {
                    println!(
                        "ASSERT {:<28} {} - {}",
                        a.name,
                        if a.passed { "PASS" } else { "FAIL" },
                        a.detail
                    );
                }
                println!(
                    "run {} -> {} ({} artifacts)",
                    if record.passed { "PASSED" } else { "FAILED" },
                    out_dir.display(),
                    record.artifacts.len()
                );
                if record.passed {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(runner::RunError::Config(errors)) => {
                eprintln!("configuration invalid:");
                for e in errors {
                    eprintln!("  - {e}");
                }
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        Command::Simulate {
            modes,
            dt,
            horizon,
            count,
            seed,
            out,
            noise_amplitude,
            initial_scale,
        } => {
            let config = config::Config {
                kind: "simulate".into(),
                master_seed: seed,
                output: Some(out),
                model: Some(config::ModelRef {
                    source: "torus".into(),
                    max_wavenumber: Some(modes),
                    noise_amplitude: Some(noise_amplitude),
                    forcing_amplitude: None,
                    path: None,
                }),
                chain: None,
                simulate: Some(config::SimulateParams {
                    count,
                    dt,
                    horizon,
                    initial: "gaussian".into(),
                    initial_scale: Some(initial_scale),
                    u0: None,
                }),
                pressure: None,
                rate: None,
                oracle: None,
                couple: None,
                probes: None,
                entropy: None,
            };
            let text = toml::to_string_pretty(&config).expect("config serializes");
            match runner::run_parsed(config, text) {
                Ok((record, out_dir)) => {
                    println!(
                        "run {} -> {} ({} artifacts)",
                        if record.passed { "PASSED" } else { "FAILED" },
                        out_dir.display(),
                        record.artifacts.len()
                    );
                    if record.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(runner::RunError::Config(errors)) => {
                    for e in errors {
                        eprintln!("  - {e}");
                    }
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Verify { suite, model } => verify(suite.as_deref(), model.as_deref()),
        Command::ExportModel {
            max_wavenumber,
            noise_amplitude,
            forcing_amplitude,
            out,
        } => {
            let forcing = if forcing_amplitude != 0.0 {
                ForcingSpec::LowestShellCos {
                    amplitude: forcing_amplitude,
                }
            } else {
                ForcingSpec::None
            };
            match build_torus_model(
                max_wavenumber,
                &forcing,
                &NoiseSpec::Uniform {
                    amplitude: noise_amplitude,
                },
            ) {
                Ok(model) => {
                    if let Err(e) = std::fs::write(&out, model.to_document()) {
                        eprintln!("write failed: {e}");
                        return ExitCode::from(1);
                    }
                    println!(
                        "model {} with {} modes (B0 = {}, B1 = {}, ||h||_1 = {}) -> {}",
                        model.id(),
                        model.n_modes(),
                        model.b0(),
                        model.b1(),
                        model.forcing_u1_norm(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("model construction failed: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Inspect { run_dir } => match runner::inspect(&run_dir) {
            Ok((record, mismatches)) => {
                println!("config_hash {}", record.config_hash);
                println!("passed {}", record.passed);
                for a in &record.assertions {
                    println!(
                        "ASSERT {:<28} {} - {}",
                        a.name,
                        if a.passed { "PASS" } else { "FAIL" },
                        a.detail
                    );
                }
                for artifact in &record.artifacts {
                    println!("artifact {} {}", artifact.fnv64, artifact.path);
                }
                if mismatches.is_empty() {
                    println!("manifest verified");
                    ExitCode::SUCCESS
                } else {
                    for m in &mismatches {
                        eprintln!("hash mismatch: {m}");
                    }
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        Command::Empirical { action } => empirical_cmd(action),
    }
}

fn verify(suite: Option<&str>, model_path: Option<&std::path::Path>) -> ExitCode {
    let Some(suite_name) = suite else {
        println!("available suites:");
        println!("  algebraic   - exact identities and chain oracles");
        println!("  dynamics    - trajectory-level dynamics checks");
        println!("  montecarlo  - frequency and consistency experiments");
        println!("  acceptance  - all of the above");
        return ExitCode::SUCCESS;
    };
    let model_override = match model_path {
        Some(path) => match std::fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|doc| {
                GalerkinModel::from_document_unvalidated(&doc).map_err(|e| e.to_string())
            }) {
            Ok(m) => Some(m),
            Err(e) => {
                eprintln!("model load failed: {e}");
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let selected: Vec<&'static str> = match suite_name {
        "acceptance" => acceptance::criteria().iter().map(|(n, _)| *n).collect(),
        name => match acceptance::Suite::parse(name) {
            Some(suite) => acceptance::criteria()
                .iter()
                .filter(|(_, s)| *s == suite)
                .map(|(n, _)| *n)
                .collect(),
            None => {
                eprintln!("unknown suite {name:?}; run `dvns verify` to list suites");
                return ExitCode::from(2);
            }
        },
    };
    let mut all_passed = true;
    for name in selected {
        let report = acceptance::run(name, model_override.as_ref())
            .expect("registered criteria are runnable");
        println!(
            "VERIFY {:<22} {} - {}",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            report.detail
        );
        all_passed &= report.passed;
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn empirical_cmd(action: EmpiricalAction) -> ExitCode {
    use runner::empirical_cmd as backend;
    let write_out = |path: &PathBuf, doc: String| -> ExitCode {
        match std::fs::write(path, doc) {
            Ok(()) => {
                println!("wrote {}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("write failed: {e}");
                ExitCode::from(1)
            }
        }
    };
    match action {
        EmpiricalAction::Occupation { traj, t, out } => match backend::occupation(&traj, t) {
            Ok(doc) => write_out(&out, doc),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        EmpiricalAction::Window {
            traj,
            t,
            window,
            backward,
            out,
        } => match backend::window(&traj, t, window, backward) {
            Ok(doc) => write_out(&out, doc),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        EmpiricalAction::Periodize {
            traj,
            t,
            window,
            out,
        } => match backend::periodize(&traj, t, window) {
            Ok(doc) => write_out(&out, doc),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        EmpiricalAction::Distance { a, b, metric } => match backend::distance(&a, &b, &metric) {
            Ok(d) => {
                println!("{d}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
    }
}
