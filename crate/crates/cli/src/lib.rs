//! Command-line front end: argument parsing, config loading, output files
//! and the run manifest.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::Ctx;
use output::Outputs;
use prcalc::Error;

#[derive(Parser, Debug)]
#[command(name = "prcalc", version, about = "Piecewise rigid functions on voxel grids")]
pub struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Check input files and sample declared density hypotheses.
    Validate,
    /// Join two functions across a transition layer.
    Join,
    /// Join keeping the inner function on the boundary.
    JoinBoundary,
    /// Solve a Dirichlet cell problem.
    Minimize,
    /// Recover a surface density from shrinking cell problems.
    Density,
    /// Run a sequence of energies against a limit.
    Gamma,
    /// Truncate a function with far components.
    Truncate,
    /// Decompose a connected voxel set around a point or line.
    Decompose,
    /// Render a 2D function or set as SVG.
    Render,
    /// Certify the rotation or skew chart by sampling.
    Certify {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Join => "join",
            Command::JoinBoundary => "join-boundary",
            Command::Minimize => "minimize",
            Command::Density => "density",
            Command::Gamma => "gamma",
            Command::Truncate => "truncate",
            Command::Decompose => "decompose",
            Command::Render => "render",
            Command::Certify { .. } => "certify",
        }
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DomainMismatch => "domain_mismatch",
        Error::InvalidDomain(_) => "invalid_domain",
        Error::EmptySet(_) => "empty_set",
        Error::SlabTooThin { .. } => "slab_too_thin",
        Error::OutOfRange(_) => "out_of_range",
        Error::NotInMatrixSet(_) => "not_in_matrix_set",
        Error::OutsideChart { .. } => "outside_chart",
        Error::VolumeBelowDelta { .. } => "volume_below_delta",
        Error::Certificate(_) => "certificate",
        Error::Rejected(_) => "rejected",
        Error::Unsupported(_) => "unsupported",
        Error::EmptyOverlap => "empty_overlap",
        Error::NotJumpPoint(_) => "not_jump_point",
        Error::Disconnected => "disconnected",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
    }
}

/// Exit code for an error: 1 when a certified step fails, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Certificate(_) | Error::Rejected(_) => 1,
        _ => 2,
    }
}

fn report(kind: &str, message: &str, code: i32) -> i32 {
    let obj = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{obj}");
    code
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("PRCALC_LOG")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return report("usage", first.trim_start_matches("error: "), 2);
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return report("usage", "--threads must be positive", 2);
        }
        // Fails only if a pool exists already, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = match Outputs::new(&cli.out_dir) {
        Ok(o) => o,
        Err(e) => return report(error_kind(&e), &e.to_string(), 2),
    };
    let mut ctx = Ctx {
        seed: cli.seed,
        config: cli.config.clone(),
        out,
        resolved: serde_json::Value::Null,
        failed: None,
    };
    log::info!("running {}", cli.command.name());
    let result = match cli.command.clone() {
        Command::Validate => commands::validate(&mut ctx),
        Command::Join => commands::join_cmd(&mut ctx),
        Command::JoinBoundary => commands::join_boundary(&mut ctx),
        Command::Minimize => commands::minimize(&mut ctx),
        Command::Density => commands::density(&mut ctx),
        Command::Gamma => commands::gamma(&mut ctx),
        Command::Truncate => commands::truncate(&mut ctx),
        Command::Decompose => commands::decompose(&mut ctx),
        Command::Render => commands::render(&mut ctx),
        Command::Certify { kind, samples } => commands::certify(&mut ctx, kind, samples),
    };
    let code = match &result {
        Ok(()) => match &ctx.failed {
            None => 0,
            Some(why) => report("check_failed", why, 1),
        },
        Err(e) => {
            let code = exit_code(e);
            if let Error::Certificate(c) = e {
                if let Err(w) = ctx.out.json("certificate.json", c) {
                    log::error!("could not write the failing certificate: {w}");
                }
            }
            report(error_kind(e), &e.to_string(), code)
        }
    };
    if code <= 1 {
        let manifest = json!({
            "command": cli.command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "library_version": prcalc::VERSION,
            "seed": cli.seed,
            "deterministic": cli.deterministic,
            "config": ctx.resolved,
            "outputs": ctx.out.files(),
            "exit_code": code,
        });
        if let Err(e) = prcalc::io::write_json(&cli.out_dir.join("manifest.json"), &manifest) {
            return report(error_kind(&e), &e.to_string(), 2);
        }
    }
    code
}
