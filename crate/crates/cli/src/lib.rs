//! Command implementations behind the `egobench` binary.

pub mod args;
mod data;
mod evaluate;
mod kernels;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use egobench::Exec;

use args::{Cli, Command, EvalCommand, KernelsCommand};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Inputs were read fine but failed a check.
    Violations,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Violations => 1,
        }
    }
}

pub struct Ctx {
    pub exec: Exec,
    pub seed: u64,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<Status> {
    let ctx = Ctx {
        exec: Exec::with_threads(cli.threads),
        seed: cli.seed,
    };
    match cli.command {
        Command::Validate(a) => data::validate(&a),
        Command::Coverage(a) => data::coverage(&a),
        Command::Consensus(a) => data::consensus(&a, &ctx),
        Command::Split(a) => data::split(&a, &ctx),
        Command::Stats(a) => data::stats(&a, &ctx),
        Command::Eval(EvalCommand::Category(a)) => evaluate::category(&a, &ctx),
        Command::Eval(EvalCommand::Instance(a)) => evaluate::instance(&a, &ctx),
        Command::Eval(EvalCommand::Cl(a)) => evaluate::cl(&a, &ctx),
        Command::Kernels(KernelsCommand::Selftest(a)) => kernels::selftest(&a, &ctx),
        Command::Match(a) => kernels::match_proposals(&a, &ctx),
    }
}
