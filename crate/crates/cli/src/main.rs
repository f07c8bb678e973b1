//! `mixed-cem`: multiscale mixed solves, convergence and decay studies,
//! local spectra and medium generation from a TOML run file.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig, OUT_ENV};

#[derive(Parser)]
#[command(
    name = "mixed-cem",
    version,
    about = "Mixed multiscale solver for high-contrast Darcy flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides MIXED_CEM_OUT and the run file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Medium seed (overrides the run file).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One multiscale solve with solution, norm and mass residual reports.
    Solve,
    /// Error table over the `[convergence]` rows.
    Convergence,
    /// Global versus localized basis differences over oversampling layers.
    Decay,
    /// Per-element eigenvalue table.
    Eigs,
    /// Write the configured permeability as a raster.
    GenMedium,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Convergence => "convergence",
            Command::Decay => "decay",
            Command::Eigs => "eigs",
            Command::GenMedium => "gen-medium",
        }
    }
}

fn error_kind(e: &(dyn std::error::Error + 'static)) -> &'static str {
    use mixed_cem::Error;
    if e.is::<ConfigError>() {
        return "config";
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => "config",
        Some(Error::Load { .. }) => "load",
        Some(Error::Index(_)) => "index",
        Some(Error::Dimension(_)) => "dimension",
        Some(Error::Solver { .. }) => "solver",
        Some(Error::Singular { .. }) => "singular",
        Some(Error::Io(_)) => "io",
        None if e.is::<std::io::Error>() => "io",
        None => "other",
    }
}

fn report(command: Command, out: Option<&Path>, e: &(dyn std::error::Error + 'static)) {
    let record = serde_json::json!({
        "command": command.name(),
        "kind": error_kind(e),
        "message": e.to_string(),
    });
    eprintln!("{record}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
        }
    }
}

fn run(cli: &Cli) -> Result<(), (Option<PathBuf>, Box<dyn std::error::Error>)> {
    let early = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from));
    let path = cli.config.as_ref().ok_or_else(|| {
        (
            early.clone(),
            Box::new(ConfigError("--config is required".into())) as _,
        )
    })?;
    let mut cfg = RunConfig::load(path).map_err(|e| (early.clone(), Box::new(e) as _))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    let out = early
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let fail = |e: Box<dyn std::error::Error>| (Some(out.clone()), e);
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| fail(Box::new(e)))?;
    }
    std::fs::create_dir_all(&out).map_err(|e| fail(Box::new(e)))?;
    let result = match cli.command {
        Command::Solve => commands::cmd_solve(&cfg, &out),
        Command::Convergence => commands::cmd_convergence(&cfg, &out),
        Command::Decay => commands::cmd_decay(&cfg, &out),
        Command::Eigs => commands::cmd_eigs(&cfg, &out),
        Command::GenMedium => commands::cmd_gen_medium(&cfg, &out),
    };
    result.map_err(fail)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((out, e)) => {
            report(cli.command, out.as_deref(), e.as_ref());
            ExitCode::FAILURE
        }
    }
}
