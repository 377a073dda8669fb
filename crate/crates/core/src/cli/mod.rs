//! The `v4d` command line. Every command resolves a JSON run config (from
//! `--config`, then flag overrides), writes it next to its outputs as
//! `config.json`, and can be rerun from that file.

mod check_cmds;
mod infer_cmds;
mod train_cmds;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use check_cmds::{
    EquivArgs, EquivConfig, GradcheckArgs, GradcheckConfig, ReportArgs, ReportConfig,
};
pub use infer_cmds::{CamArgs, CamConfig, InferArgs, InferConfig, PREDICTION_SCHEMA};
pub use train_cmds::{
    MakeOrderTaskArgs, MakeOrderTaskConfig, StagedArgs, StagedRunConfig, TrainArgs, TrainConfig,
    TrainSummary,
};

#[derive(Debug, Parser)]
#[command(name = "v4d", version, about = "Video-level 4D convolutional networks")]
pub struct Cli {
    /// Worker threads; V4D_THREADS takes precedence. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Bit-reproducible outputs: wall-clock timings are left out.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a video with combinatorial unit selection.
    Infer(InferArgs),
    /// Train a network on a task.
    Train(TrainArgs),
    /// Backbone, frozen-4D and full training in sequence.
    #[command(name = "stagedtrain")]
    StagedTrain(StagedArgs),
    /// Parameter and multiply-accumulate counts per layer.
    Report(ReportArgs),
    /// Every backward pass against central differences.
    Gradcheck(GradcheckArgs),
    /// Direct vs decomposed 4D convolution and the reference loops.
    Equiv(EquivArgs),
    /// Class activation maps over units, frames and pixels.
    Cam(CamArgs),
    /// Write the synthetic unit-order datasets.
    MakeOrderTask(MakeOrderTaskArgs),
}

/// Settings shared by every command.
#[derive(Clone, Copy, Debug, Default)]
pub struct Globals {
    pub deterministic: bool,
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match std::env::var("V4D_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!("V4D_THREADS must be a positive integer, got {v:?}"))
        })?),
        Err(_) => flag,
    };
    match threads {
        Some(0) => Err(Error::Config("thread count must be positive".into())),
        Some(n) => {
            // A second initialization in the same process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
            Ok(())
        }
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let g = Globals {
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Infer(a) => infer_cmds::infer(a, g),
        Command::Train(a) => train_cmds::train(a, g),
        Command::StagedTrain(a) => train_cmds::staged(a, g),
        Command::Report(a) => check_cmds::report(a, g),
        Command::Gradcheck(a) => check_cmds::gradcheck(a, g),
        Command::Equiv(a) => check_cmds::equiv(a, g),
        Command::Cam(a) => infer_cmds::cam(a, g),
        Command::MakeOrderTask(a) => train_cmds::write_order_task(a, g),
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `config.json` in `dir`, tagged with the command that produced it.
pub(crate) fn write_config<S: Serialize>(dir: &Path, command: &str, cfg: &S) -> Result<()> {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("command".into(), command.into());
    }
    write_json(&dir.join("config.json"), &value)
}

/// Read a config written by [`write_config`] (or by hand) for `command`.
pub(crate) fn read_config<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let map = value
        .as_object_mut()
        .ok_or_else(|| bad("expected a JSON object".into()))?;
    match map.remove("command") {
        Some(serde_json::Value::String(c)) if c == command => {}
        None => {}
        Some(other) => {
            return Err(bad(format!(
                "config is for command {other}, not {command:?}"
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

pub(crate) fn base_config<C: DeserializeOwned>(
    path: Option<&PathBuf>,
    command: &str,
    default: impl FnOnce() -> Result<C>,
) -> Result<C> {
    match path {
        Some(p) => read_config(p, command),
        None => default(),
    }
}
