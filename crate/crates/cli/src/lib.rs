//! The `sir` command line: every subcommand writes its outputs and a
//! `config.json` snapshot into `--out`, and `sir replay` reruns a snapshot.

pub mod args;
pub mod commands;
pub mod experiment;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};
use sir_core::train::TrainError;

pub use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "SIR_THREADS";

pub const SNAPSHOT_FILE: &str = "config.json";

/// Invalid flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
}

pub fn write_snapshot(command: &Command, dir: &Path) -> Result<()> {
    let snap = Snapshot {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.clone(),
    };
    let path = dir.join(SNAPSHOT_FILE);
    let text = serde_json::to_string_pretty(&snap)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn absolutize(command: &mut Command) -> Result<()> {
    for p in command.paths_mut() {
        if p.is_relative() {
            *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs an already parsed command, writing its snapshot first.
pub fn execute(mut command: Command) -> Result<()> {
    if let Command::Replay(r) = &command {
        let mut snap = read_snapshot(&r.config)?;
        if let Some(out) = &r.out {
            snap.command.set_out_dir(out.clone());
        }
        if let Command::Replay(_) = snap.command {
            return Err(usage("a snapshot cannot replay another snapshot"));
        }
        return execute(snap.command);
    }
    absolutize(&mut command)?;
    let out: PathBuf = command.out_dir().expect("non-replay commands have an output").to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_snapshot(&command, &out)?;
    log::info!("{} -> {}", command.name(), out.display());
    commands::dispatch(&command)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
