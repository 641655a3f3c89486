//! `isoext` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 mathematical
//! failure (margin, radius, breakdown), 4 stall or exhausted escalation.

mod commands;
mod config;
mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError { code: 1, message: format!("{}: {e}", path.display()) }
    }
    pub fn validation(message: String) -> Self {
        CliError { code: 2, message }
    }
    pub fn math(message: String) -> Self {
        CliError { code: 3, message }
    }
    pub fn stall(message: String) -> Self {
        CliError { code: 4, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<isoext::error::Error> for CliError {
    fn from(e: isoext::error::Error) -> Self {
        if e.is_validation() {
            CliError::validation(e.to_string())
        } else {
            CliError::math(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "isoext", version, about = "Convex integration of C^{1,α} isometric extensions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to everything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Do not write OBJ meshes.
    #[arg(long, global = true)]
    no_meshes: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the corrugation profile and its circle identity.
    DemoCorrugation,
    /// Decompose the boundary ansatz deficit into primitive metrics.
    Decompose,
    /// Single convex-integration steps on a flat base.
    StepDemo,
    /// Conformal-deficit stages on a flat base.
    StageDemo,
    /// Build an adapted short extension from boundary data.
    Extend,
    /// Run the convex-integration iteration from an adapted short state.
    Iterate(IterateArgs),
}

#[derive(Args)]
struct IterateArgs {
    /// State bundle directory written by `extend`.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    q_max: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    big_a: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    /// Escalate `A` on violated inductive conditions (default).
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Record violations and breakdowns instead of failing.
    #[arg(long)]
    lenient: bool,
}

impl IterateArgs {
    fn apply(&self, cfg: &mut Config) {
        if let Some(b) = &self.bundle {
            cfg.iteration.bundle = Some(b.clone());
            cfg.iteration.start = config::StartState::Bundle;
        }
        let s = &mut cfg.schedule;
        s.q_max = self.q_max.unwrap_or(s.q_max);
        s.tol = self.tol.unwrap_or(s.tol);
        s.alpha = self.alpha.unwrap_or(s.alpha);
        s.a = self.a.unwrap_or(s.a);
        s.big_a = self.big_a.unwrap_or(s.big_a);
        if self.eps0.is_some() {
            s.eps0 = self.eps0;
        }
        if self.strict {
            cfg.iteration.strict = true;
        }
        if self.lenient {
            cfg.iteration.strict = false;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.common.config.as_deref())?;
    if let Some(out) = cli.common.out {
        cfg.output.dir = out;
    }
    if cli.common.no_meshes {
        cfg.output.meshes = false;
    }
    if let Command::Iterate(args) = &cli.command {
        args.apply(&mut cfg);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| CliError::io(&cfg.output.dir, e))?;
    match cli.command {
        Command::DemoCorrugation => commands::demo_corrugation(&cfg),
        Command::Decompose => commands::decompose(&cfg),
        Command::StepDemo => commands::step_demo(&cfg),
        Command::StageDemo => commands::stage_demo(&cfg),
        Command::Extend => commands::extend(&cfg),
        Command::Iterate(_) => commands::iterate(&cfg),
    }
}
