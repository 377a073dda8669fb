use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::training::{
    accuracy, load_state, make_order_task, motif_units, order_task_network, staged_train,
    train_loop, Dataset, MetricsSink, OptimizerState, OrderTaskSpec, StagedConfig, StagedData,
    TrainOptions, TrainSchedule,
};

use super::{base_config, create_dir, write_config, write_json, Globals};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Rerun from a saved config.json; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only `order` (the synthetic unit-order task) is built in.
    #[arg(long)]
    pub task: Option<String>,
    /// Schedule preset: desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Directory written by make-order-task, instead of generating data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Network spec JSON; the truncated order-task network by default.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Withhold updates from residual 4D blocks.
    #[arg(long)]
    pub freeze_4d: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: String,
    pub order: OrderTaskSpec,
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub network: NetworkSpec,
    pub schedule: TrainSchedule,
    pub seed: u64,
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub freeze_4d: bool,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Accuracy on the test set with every sample's units reversed.
    pub reversed_eval_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_eval_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_reversed_eval_acc: Option<f64>,
}

fn read_network(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Shorten a schedule, dropping learning-rate steps that no longer fit.
fn with_epochs(mut s: TrainSchedule, epochs: usize) -> TrainSchedule {
    s.total_epochs = epochs;
    s.lr_drop_epochs.retain(|&e| e < epochs);
    s
}

fn resolve_train(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = base_config(a.config.as_ref(), "train", || {
        let order = OrderTaskSpec::default();
        Ok(TrainConfig {
            task: "order".into(),
            network: order_task_network(&order),
            order,
            data: None,
            schedule: TrainSchedule::desk(),
            seed: 0,
            init: None,
            freeze_4d: false,
            out: PathBuf::new(),
        })
    })?;
    if let Some(t) = &a.task {
        cfg.task = t.clone();
    }
    if let Some(p) = &a.preset {
        cfg.schedule = TrainSchedule::preset(p)?;
    }
    if let Some(lr) = a.lr {
        cfg.schedule.sgd.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.schedule = with_epochs(cfg.schedule, e);
    }
    if let Some(b) = a.batch_size {
        cfg.schedule.batch_size = b;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.order.seed = seed;
        cfg.network.seed = seed;
    }
    if let Some(n) = a.train_size {
        cfg.order.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.order.test_size = n;
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(p) = &a.network {
        cfg.network = read_network(p)?;
    }
    if let Some(p) = &a.init {
        cfg.init = Some(p.clone());
    }
    cfg.freeze_4d |= a.freeze_4d;
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if cfg.task != "order" {
        return Err(Error::Config(format!(
            "unknown task {:?}; only \"order\" is built in",
            cfg.task
        )));
    }
    if cfg.out.as_os_str().is_empty() {
        return Err(Error::Config("--out is required".into()));
    }
    cfg.schedule.validate()?;
    cfg.network.validate()?;
    Ok(cfg)
}

fn order_data(order: &OrderTaskSpec, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((Dataset::load(d, "train")?, Dataset::load(d, "test")?)),
        None => make_order_task(order),
    }
}

pub(super) fn train(a: TrainArgs, _g: Globals) -> Result<()> {
    let cfg = resolve_train(&a)?;
    create_dir(&cfg.out)?;
    write_config(&cfg.out, "train", &cfg)?;
    let (train, test) = order_data(&cfg.order, cfg.data.as_deref())?;

    let mut net = Network::<f32>::build(&cfg.network)?;
    if let Some(init) = &cfg.init {
        let (_, state) = load_state::<f32>(init)?;
        net.load_state(&state, true)?;
    }
    let mut metrics = MetricsSink::create(&cfg.out.join("metrics.jsonl"))?;
    let mut opt = OptimizerState::new(cfg.schedule.sgd);
    let ckpt = cfg.out.join("checkpoint");
    let opts = TrainOptions {
        schedule: &cfg.schedule,
        seed: cfg.seed,
        freeze_4d: cfg.freeze_4d,
        stage: None,
        checkpoint_dir: Some(&ckpt),
    };
    let history = train_loop(
        &mut net,
        &train,
        Some(&test),
        &mut opt,
        &opts,
        Some(&mut metrics),
    )?;
    let last = history.last().expect("at least one epoch");
    let summary = TrainSummary {
        schema: "v4d.train/1".into(),
        epochs: history.len(),
        final_loss: last.loss,
        train_acc: last.acc,
        eval_acc: accuracy(&net, &test, EVAL_BATCH)?,
        reversed_eval_acc: accuracy(&net, &test.reversed_units()?, EVAL_BATCH)?,
        stage2_eval_acc: None,
        stage2_reversed_eval_acc: None,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs: loss {:.4}, train acc {:.3}, eval acc {:.3}, reversed eval acc {:.3}",
        summary.epochs,
        summary.final_loss,
        summary.train_acc,
        summary.eval_acc,
        summary.reversed_eval_acc
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct StagedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `order` (short schedules tuned for the order task), desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    /// Learning rate for all three stages.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Single-unit clips for stage one.
    #[arg(long)]
    pub stage1_samples: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagedRunConfig {
    pub order: OrderTaskSpec,
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub stage1_samples: usize,
    pub staged: StagedConfig,
    pub out: PathBuf,
}

fn resolve_staged(a: &StagedArgs) -> Result<StagedRunConfig> {
    let mut cfg = base_config(a.config.as_ref(), "stagedtrain", || {
        let order = OrderTaskSpec::default();
        Ok(StagedRunConfig {
            staged: StagedConfig::order_experiment(&order),
            order,
            data: None,
            stage1_samples: 2000,
            out: PathBuf::new(),
        })
    })?;
    if let Some(seed) = a.seed {
        cfg.order.seed = seed;
        cfg.staged.seed = seed;
        cfg.staged.network.seed = seed;
    }
    match a.preset.as_deref() {
        None => {}
        Some("order") => {
            let network = cfg.staged.network.clone();
            cfg.staged = StagedConfig {
                network,
                ..StagedConfig::order_experiment(&cfg.order)
            };
        }
        Some(p) => {
            let s = TrainSchedule::preset(p)?;
            cfg.staged.stage1 = s.clone();
            cfg.staged.stage2 = s.clone();
            cfg.staged.stage3 = s;
        }
    }
    if let Some(lr) = a.lr {
        for s in [
            &mut cfg.staged.stage1,
            &mut cfg.staged.stage2,
            &mut cfg.staged.stage3,
        ] {
            s.sgd.lr = lr;
        }
    }
    if let Some(n) = a.train_size {
        cfg.order.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.order.test_size = n;
    }
    if let Some(n) = a.stage1_samples {
        cfg.stage1_samples = n;
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if cfg.out.as_os_str().is_empty() {
        return Err(Error::Config("--out is required".into()));
    }
    for s in [&cfg.staged.stage1, &cfg.staged.stage2, &cfg.staged.stage3] {
        s.validate()?;
    }
    Ok(cfg)
}

pub(super) fn staged(a: StagedArgs, _g: Globals) -> Result<()> {
    let cfg = resolve_staged(&a)?;
    create_dir(&cfg.out)?;
    write_config(&cfg.out, "stagedtrain", &cfg)?;
    let (train, test) = order_data(&cfg.order, cfg.data.as_deref())?;
    let stage1 = motif_units(
        &cfg.order,
        cfg.stage1_samples,
        cfg.order.seed.wrapping_add(7),
    )?;
    let mut metrics = MetricsSink::create(&cfg.out.join("metrics.jsonl"))?;
    let data = StagedData {
        stage1: &stage1,
        train: &train,
        eval: Some(&test),
    };
    let outcome = staged_train(&cfg.staged, &data, Some(&cfg.out), Some(&mut metrics))?;
    let reversed = test.reversed_units()?;
    let last = outcome.history.last().expect("at least one epoch");
    let summary = TrainSummary {
        schema: "v4d.train/1".into(),
        epochs: outcome.history.len(),
        final_loss: last.loss,
        train_acc: last.acc,
        eval_acc: accuracy(&outcome.network, &test, EVAL_BATCH)?,
        reversed_eval_acc: accuracy(&outcome.network, &reversed, EVAL_BATCH)?,
        stage2_eval_acc: Some(accuracy(&outcome.stage2_network, &test, EVAL_BATCH)?),
        stage2_reversed_eval_acc: Some(accuracy(&outcome.stage2_network, &reversed, EVAL_BATCH)?),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "stage 2 eval acc {:.3}; final eval acc {:.3}, reversed {:.3}",
        summary.stage2_eval_acc.unwrap_or(f64::NAN),
        summary.eval_acc,
        summary.reversed_eval_acc
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct MakeOrderTaskArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub library: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeOrderTaskConfig {
    pub order: OrderTaskSpec,
    pub out: PathBuf,
}

pub(super) fn write_order_task(a: MakeOrderTaskArgs, _g: Globals) -> Result<()> {
    let mut cfg = base_config(a.config.as_ref(), "make-order-task", || {
        Ok(MakeOrderTaskConfig {
            order: OrderTaskSpec::default(),
            out: PathBuf::new(),
        })
    })?;
    let o = &mut cfg.order;
    o.seed = a.seed.unwrap_or(o.seed);
    o.units = a.units.unwrap_or(o.units);
    o.library = a.library.or(o.library);
    o.size = a.size.unwrap_or(o.size);
    o.noise = a.noise.unwrap_or(o.noise);
    o.train_size = a.train_size.unwrap_or(o.train_size);
    o.test_size = a.test_size.unwrap_or(o.test_size);
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    if cfg.out.as_os_str().is_empty() {
        return Err(Error::Config("--out is required".into()));
    }
    let (train, test) = make_order_task(&cfg.order)?;
    create_dir(&cfg.out)?;
    write_config(&cfg.out, "make-order-task", &cfg)?;
    train.save(&cfg.out, "train")?;
    test.save(&cfg.out, "test")?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        cfg.out.display()
    );
    Ok(())
}
