//! Command-line front end: configuration, file formats and subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cyclewarp", version, about = "Fit stochastic time-warping models to quasi-periodic signals")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "CYCLEWARP_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Signal CSV (`x,y` or `segment,x,y`) for `fit`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate signals from given parameters or the study design.
    Simulate,
    /// Preprocess, initialize and fit every segment of the input file.
    Fit,
    /// Residual bootstrap of the fits in the output directory.
    Bootstrap,
    /// Glue fitted segments, date observations and report the age.
    Aggregate,
    /// Simulate and fit signals; print the cycle recovery rates.
    Bench,
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(i) = &self.input {
            cfg.input = Some(i.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Simulate => commands::simulate(cfg),
        Command::Fit => commands::fit(cfg),
        Command::Bootstrap => commands::bootstrap(cfg),
        Command::Aggregate => commands::aggregate(cfg),
        Command::Bench => commands::bench(cfg),
    }
}

/// 2 when the failure is numerical, 1 for input and configuration errors.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .find_map(|e| e.downcast_ref::<cyclewarp_core::Error>())
        .is_some_and(|e| e.is_numerical());
    if numerical {
        2
    } else {
        1
    }
}
