//! `nspace`: data generation, staged training, latent-space inference,
//! evaluation and profiling from one binary.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure of one command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Core(nspace::Error),
    /// A required earlier step has not been run.
    Prerequisite(String),
}

impl From<nspace::Error> for Failure {
    fn from(e: nspace::Error) -> Self {
        Failure::Core(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Prerequisite(m) => f.write_str(m),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        use nspace::Error::*;
        match self {
            Failure::Prerequisite(_) => 2,
            Failure::Core(e) => match e {
                Config(_) | InvalidArgument { .. } | SingularTransform { .. } => 2,
                Data(_) | Io { .. } | Format(_) | Checksum { .. } | Version { .. } | Image(_) | Indivisible { .. }
                | Shape { .. } => 3,
                NonFiniteLoss { .. } => 4,
                NonScalarLoss(_) | MissingGradient(_) => 1,
            },
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match nspace::threads_from_env() {
        Ok(t) => t,
        Err(e) => return fail(e.into()),
    };
    if let Err(e) = nspace::init_threads(threads) {
        return fail(e.into());
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainRgb(a) => commands::train_rgb(a),
        Command::TrainRaw(a) => commands::train_raw(a),
        Command::TrainHead(a) => commands::train_head(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Transform(a) => commands::transform(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Segment(a) => commands::segment(a),
        Command::Depth(a) => commands::depth(a),
        Command::Similarity(a) => commands::similarity(a),
        Command::Profile(a) => commands::profile(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: Failure) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
