//! Three-stage protocol: a plain 3D backbone on single units, then the 4D
//! network with its (zero) 4D blocks held fixed, then everything.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

use super::checkpoint::save_checkpoint;
use super::optimizer::{OptimizerState, SgdConfig};
use super::order_task::{order_task_network, Dataset, OrderTaskSpec};
use super::schedule::TrainSchedule;
use super::trainer::{train_loop, EpochMetrics, MetricsSink, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedConfig {
    /// The final network; it must contain residual 4D blocks.
    pub network: NetworkSpec,
    /// Classes of the single-unit stage-one data; the final network's when absent.
    #[serde(default)]
    pub stage1_classes: Option<usize>,
    pub stage1: TrainSchedule,
    pub stage2: TrainSchedule,
    pub stage3: TrainSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl StagedConfig {
    /// The order-task run: 3 epochs of motif pretraining, 2 with the 4D
    /// block held at zero, 5 with everything trainable; lr 0.05, batch 8.
    pub fn order_experiment(task: &OrderTaskSpec) -> Self {
        let schedule = |epochs: usize, drops: Vec<usize>| TrainSchedule {
            total_epochs: epochs,
            lr_drop_epochs: drops,
            drop_factor: 0.1,
            batch_size: 8,
            sgd: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
        };
        StagedConfig {
            network: order_task_network(task),
            stage1_classes: Some(task.library_size()),
            stage1: schedule(3, vec![]),
            stage2: schedule(2, vec![]),
            stage3: schedule(5, vec![3]),
            seed: task.seed,
        }
    }

    /// The final network without 4D blocks, on single units.
    pub fn backbone_spec(&self) -> NetworkSpec {
        NetworkSpec {
            units: 1,
            insertions: Vec::new(),
            num_classes: self.stage1_classes.unwrap_or(self.network.num_classes),
            ..self.network.clone()
        }
    }
}

pub struct StagedData<'a> {
    /// `(N, C, 1, T, H, W)` single-unit clips.
    pub stage1: &'a Dataset,
    pub train: &'a Dataset,
    pub eval: Option<&'a Dataset>,
}

pub struct StagedOutcome {
    pub network: Network<f32>,
    /// The network at the end of stage two, 4D blocks still zero.
    pub stage2_network: Network<f32>,
    pub history: Vec<EpochMetrics>,
}

/// Backbone weights for the 4D network: everything except a classifier
/// whose shape differs.
fn transferable(backbone: &Network<f32>, target: &Network<f32>) -> BTreeMap<String, Tensor<f32>> {
    let target_state = target.state_dict();
    backbone
        .state_dict()
        .into_iter()
        .filter(|(k, v)| target_state.get(k).is_some_and(|t| t.shape() == v.shape()))
        .collect()
}

pub fn staged_train(
    cfg: &StagedConfig,
    data: &StagedData<'_>,
    out_dir: Option<&Path>,
    mut metrics: Option<&mut MetricsSink>,
) -> Result<StagedOutcome> {
    cfg.network.validate()?;
    if cfg.network.insertions.is_empty() {
        return Err(Error::Config(
            "staged training needs a network with 4D blocks".into(),
        ));
    }
    if data.stage1.num_units() != 1 {
        return Err(Error::Config(
            "stage one trains on single-unit clips".into(),
        ));
    }
    let ckpt = |name: &str| out_dir.map(|d| d.join(name));
    let mut history = Vec::new();

    let mut backbone = Network::<f32>::build(&cfg.backbone_spec())?;
    let mut opt = OptimizerState::new(cfg.stage1.sgd);
    let dir1 = ckpt("stage1");
    let opts = TrainOptions {
        schedule: &cfg.stage1,
        seed: cfg.seed,
        freeze_4d: false,
        stage: Some("stage1".into()),
        checkpoint_dir: dir1.as_deref(),
    };
    history.extend(train_loop(
        &mut backbone,
        data.stage1,
        None,
        &mut opt,
        &opts,
        metrics.as_deref_mut(),
    )?);

    let mut net = Network::<f32>::build(&cfg.network)?;
    let state = transferable(&backbone, &net);
    let missing = net.load_state(&state, false)?;
    if let Some(odd) = missing
        .iter()
        .find(|m| !m.contains(".fd") && !m.starts_with("head."))
    {
        return Err(Error::Model(format!("backbone checkpoint lacks {odd}")));
    }
    let mut opt = OptimizerState::new(cfg.stage2.sgd);
    let dir2 = ckpt("stage2");
    let opts = TrainOptions {
        schedule: &cfg.stage2,
        seed: cfg.seed + 1,
        freeze_4d: true,
        stage: Some("stage2".into()),
        checkpoint_dir: dir2.as_deref(),
    };
    history.extend(train_loop(
        &mut net,
        data.train,
        data.eval,
        &mut opt,
        &opts,
        metrics.as_deref_mut(),
    )?);
    let stage2_network = net.clone();

    let mut opt = OptimizerState::new(cfg.stage3.sgd);
    let dir3 = ckpt("stage3");
    let opts = TrainOptions {
        schedule: &cfg.stage3,
        seed: cfg.seed + 2,
        freeze_4d: false,
        stage: Some("stage3".into()),
        checkpoint_dir: dir3.as_deref(),
    };
    history.extend(train_loop(
        &mut net, data.train, data.eval, &mut opt, &opts, metrics,
    )?);
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final"), &net, None)?;
    }
    Ok(StagedOutcome {
        network: net,
        stage2_network,
        history,
    })
}
