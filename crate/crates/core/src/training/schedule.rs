use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::optimizer::SgdConfig;

/// Step learning-rate schedule plus the optimizer settings it drives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub batch_size: usize,
    #[serde(flatten)]
    pub sgd: SgdConfig,
}

pub const SCHEDULE_PRESETS: [&str; 2] = ["full", "desk"];

impl TrainSchedule {
    /// 100 epochs, lr 0.01 dropped tenfold at 35, 60 and 80.
    pub fn full() -> Self {
        TrainSchedule {
            total_epochs: 100,
            lr_drop_epochs: vec![35, 60, 80],
            drop_factor: 0.1,
            batch_size: 8,
            sgd: SgdConfig::default(),
        }
    }

    /// 60 epochs, drops at 30 and 45, batch 8.
    pub fn desk() -> Self {
        TrainSchedule {
            total_epochs: 60,
            lr_drop_epochs: vec![30, 45],
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?}; expected one of {SCHEDULE_PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be positive".into());
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1])
            || self
                .lr_drop_epochs
                .last()
                .is_some_and(|&e| e >= self.total_epochs)
        {
            return bad(format!(
                "drop epochs {:?} must increase strictly and stay below {}",
                self.lr_drop_epochs, self.total_epochs
            ));
        }
        if !(self.sgd.lr >= 0.0 && self.sgd.lr.is_finite()) || !(self.drop_factor > 0.0) {
            return bad("lr must be non-negative and drop_factor positive".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.sgd.lr * self.drop_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule() {
        let s = TrainSchedule::full();
        s.validate().unwrap();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(34), 0.01);
        assert!((s.lr_at(35) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(99) - 1e-5).abs() < 1e-18);
        assert_eq!((s.sgd.momentum, s.sgd.weight_decay), (0.9, 1e-5));
    }

    #[test]
    fn rejects_bad_drops() {
        let mut s = TrainSchedule::desk();
        s.lr_drop_epochs = vec![45, 30];
        assert!(s.validate().is_err());
        s.lr_drop_epochs = vec![30, 60];
        assert!(s.validate().is_err());
        assert!(TrainSchedule::preset("fast").is_err());
    }
}
