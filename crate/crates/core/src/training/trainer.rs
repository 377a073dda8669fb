use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::tensor::Tensor;

use super::checkpoint::save_checkpoint;
use super::optimizer::{sgd_step, OptimizerState};
use super::order_task::Dataset;
use super::schedule::TrainSchedule;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

/// JSON-lines metrics file, flushed after every record.
pub struct MetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsSink {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub struct TrainOptions<'a> {
    pub schedule: &'a TrainSchedule,
    pub seed: u64,
    /// Withhold updates from residual 4D block parameters.
    pub freeze_4d: bool,
    pub stage: Option<String>,
    /// Written after every completed epoch.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Eval-mode class predictions.
pub fn predict(net: &Network<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        out.extend(argmax_rows(&net.infer(&x)?));
    }
    Ok(out)
}

pub fn accuracy(net: &Network<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let pred = predict(net, data, batch_size)?;
    Ok(pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / data.len() as f64)
}

/// First maximal column of each row.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
        })
        .collect()
}

/// Minibatch SGD over `train` for the schedule's epochs. On a non-finite
/// loss or gradient the network is restored to the end of the last good
/// epoch and a training error is returned.
pub fn train_loop(
    net: &mut Network<f32>,
    train: &Dataset,
    eval: Option<&Dataset>,
    optimizer: &mut OptimizerState<f32>,
    opts: &TrainOptions<'_>,
    mut metrics: Option<&mut MetricsSink>,
) -> Result<Vec<EpochMetrics>> {
    let schedule = opts.schedule;
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    optimizer.config = schedule.sgd;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(schedule.total_epochs);
    let mut last_good = (net.state_dict(), optimizer.clone());

    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            let (x, labels) = train.batch(chunk)?;
            let step = (|| -> Result<(f64, usize)> {
                net.zero_grads();
                let logits = net.forward(&x, Mode::Train)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "loss diverged ({loss}) in epoch {}",
                        epoch + 1
                    )));
                }
                net.backward(&grad)?;
                let freeze = opts.freeze_4d;
                sgd_step(net.params_mut(), optimizer, lr, |s| freeze && s.in_4d_block)?;
                let hits = argmax_rows(&logits)
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| p == l)
                    .count();
                Ok((loss * labels.len() as f64, hits))
            })();
            net.clear_caches();
            match step {
                Ok((l, hits)) => {
                    loss_sum += l;
                    correct += hits;
                }
                Err(e) => {
                    net.load_state(&last_good.0, true)?;
                    *optimizer = last_good.1;
                    return Err(match e {
                        Error::Training(m) => Error::Training(format!(
                            "{m}; parameters restored to the last good epoch"
                        )),
                        other => other,
                    });
                }
            }
        }
        let record = EpochMetrics {
            stage: opts.stage.clone(),
            epoch: epoch + 1,
            lr,
            loss: loss_sum / train.len() as f64,
            acc: correct as f64 / train.len() as f64,
            eval_acc: eval
                .map(|d| accuracy(net, d, schedule.batch_size.max(32)))
                .transpose()?,
        };
        if let Some(sink) = metrics.as_deref_mut() {
            sink.write(&record)?;
        }
        if let Some(dir) = opts.checkpoint_dir {
            save_checkpoint(dir, net, Some(optimizer))?;
        }
        history.push(record);
        last_good = (net.state_dict(), optimizer.clone());
    }
    Ok(history)
}
