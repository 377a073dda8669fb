use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::BlockKind;

/// A residual 4D block placed after `after_block` (0-based) of residual
/// stage `stage` (2..=5, i.e. `res2`..`res5`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub stage: usize,
    pub after_block: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 4],
}

fn default_kernel() -> [usize; 4] {
    [3, 3, 1, 1]
}

fn default_units() -> usize {
    4
}

fn default_in_channels() -> usize {
    3
}

fn default_width() -> usize {
    64
}

fn default_stages() -> usize {
    4
}

/// Serializable description of a backbone; [`super::Network::build`] turns it
/// into layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// 18 (basic blocks) or 50 (bottlenecks).
    pub depth: usize,
    pub num_classes: usize,
    /// Units per video the 4D blocks are built for.
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Stem width; stage `i` runs at `width * 2^i` (times 4 at bottleneck outputs).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Number of residual stages kept, starting from `res2`.
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Blocks per stage; the depth's standard layout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub insertions: Vec<Insertion>,
    /// Append one single-conv 3x3x3 residual block to `res4`.
    #[serde(default)]
    pub extra_res4_block: bool,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
}

pub const PRESETS: [&str; 5] = ["i3d-r18", "v4d-r18", "i3d-r50", "v4d-r50", "i3d-r18pp"];

impl NetworkSpec {
    fn base(depth: usize, num_classes: usize, units: usize) -> Self {
        NetworkSpec {
            depth,
            num_classes,
            units,
            in_channels: 3,
            width: 64,
            stages: 4,
            blocks: None,
            insertions: Vec::new(),
            extra_res4_block: false,
            seed: 0,
        }
    }

    pub fn i3d_r18(num_classes: usize) -> Self {
        Self::base(18, num_classes, 1)
    }

    /// One 3x3x1x1 block after the last block of `res3` and of `res4`.
    pub fn v4d_r18(num_classes: usize, units: usize) -> Self {
        let mut s = Self::base(18, num_classes, units);
        s.insertions = vec![
            Insertion {
                stage: 3,
                after_block: 1,
                kernel: default_kernel(),
            },
            Insertion {
                stage: 4,
                after_block: 1,
                kernel: default_kernel(),
            },
        ];
        s
    }

    pub fn i3d_r50(num_classes: usize) -> Self {
        Self::base(50, num_classes, 1)
    }

    /// Blocks after every other bottleneck of `res3` and `res4`.
    pub fn v4d_r50(num_classes: usize, units: usize) -> Self {
        let mut s = Self::base(50, num_classes, units);
        s.insertions = [(3, 0), (3, 2), (4, 0), (4, 2), (4, 4)]
            .into_iter()
            .map(|(stage, after_block)| Insertion {
                stage,
                after_block,
                kernel: default_kernel(),
            })
            .collect();
        s
    }

    pub fn i3d_r18pp(num_classes: usize) -> Self {
        let mut s = Self::i3d_r18(num_classes);
        s.extra_res4_block = true;
        s
    }

    pub fn preset(name: &str, num_classes: usize, units: usize) -> Result<Self> {
        Ok(match name {
            "i3d-r18" => Self::i3d_r18(num_classes),
            "v4d-r18" => Self::v4d_r18(num_classes, units),
            "i3d-r50" => Self::i3d_r50(num_classes),
            "v4d-r50" => Self::v4d_r50(num_classes, units),
            "i3d-r18pp" => Self::i3d_r18pp(num_classes),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        })
    }

    pub fn stage_blocks(&self) -> Vec<usize> {
        match &self.blocks {
            Some(b) => b.clone(),
            None => {
                let full: &[usize] = if self.depth == 50 {
                    &[3, 4, 6, 3]
                } else {
                    &[2, 2, 2, 2]
                };
                full[..self.stages.min(4)].to_vec()
            }
        }
    }

    pub fn block_kind(&self, stage_index: usize) -> BlockKind {
        match (self.depth == 50, stage_index < 2) {
            (false, true) => BlockKind::Basic2d,
            (false, false) => BlockKind::Basic3d,
            (true, true) => BlockKind::Bottleneck2d,
            (true, false) => BlockKind::Bottleneck3d,
        }
    }

    /// `(mid, out)` channels of stage `stage_index` (0 for `res2`).
    pub fn stage_channels(&self, stage_index: usize) -> (usize, usize) {
        let mid = self.width << stage_index;
        (mid, if self.depth == 50 { 4 * mid } else { mid })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth != 18 && self.depth != 50 {
            return bad(format!("depth must be 18 or 50, got {}", self.depth));
        }
        if self.num_classes == 0 || self.units == 0 || self.in_channels == 0 || self.width == 0 {
            return bad("num_classes, units, in_channels and width must be positive".into());
        }
        if !(1..=4).contains(&self.stages) {
            return bad(format!("stages must be in 1..=4, got {}", self.stages));
        }
        let blocks = self.stage_blocks();
        if blocks.len() != self.stages || blocks.contains(&0) {
            return bad(format!(
                "blocks {blocks:?} must list {} positive counts",
                self.stages
            ));
        }
        if self.extra_res4_block && self.stages < 3 {
            return bad("extra_res4_block needs res4".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for ins in &self.insertions {
            if ins.stage < 2 || ins.stage >= 2 + self.stages {
                return bad(format!(
                    "4D block at res{} but the network stops at res{}",
                    ins.stage,
                    self.stages + 1
                ));
            }
            if ins.after_block >= blocks[ins.stage - 2] {
                return bad(format!(
                    "4D block after res{}.{} but that stage has {} blocks",
                    ins.stage,
                    ins.after_block,
                    blocks[ins.stage - 2]
                ));
            }
            if ins.kernel.iter().any(|k| k % 2 == 0) {
                return bad(format!(
                    "4D kernel {:?} must be odd on every axis",
                    ins.kernel
                ));
            }
            if !seen.insert((ins.stage, ins.after_block)) {
                return bad(format!(
                    "two 4D blocks after res{}.{}",
                    ins.stage, ins.after_block
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            NetworkSpec::preset(name, 200, 4)
                .unwrap()
                .validate()
                .unwrap();
        }
        assert!(matches!(
            NetworkSpec::preset("r34", 10, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_bad_insertions() {
        let mut s = NetworkSpec::v4d_r18(10, 4);
        s.insertions[0].after_block = 2;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::v4d_r18(10, 4);
        s.insertions[0].kernel = [2, 3, 1, 1];
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::v4d_r18(10, 4);
        s.stages = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_defaults() {
        let s: NetworkSpec = serde_json::from_str(
            r#"{"depth":18,"num_classes":5,"insertions":[{"stage":3,"after_block":0}]}"#,
        )
        .unwrap();
        assert_eq!(s.units, 4);
        assert_eq!(s.width, 64);
        assert_eq!(s.insertions[0].kernel, [3, 3, 1, 1]);
    }
}
