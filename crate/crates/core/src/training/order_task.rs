//! Synthetic task whose label is the order of the units: each video shows
//! `U` consecutive library motifs `k, k+1, ...` (mod the library size), one
//! per unit, in ascending (label 0) or descending (label 1) order. The start
//! `k` is uniform, so every unit position sees every motif equally often in
//! both classes. Samples come in unit-reversed pairs, so the multiset of
//! units never depends on the label either.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Insertion, NetworkSpec};
use crate::tensor::{read_vt01, write_vt01, Tensor};

/// Inputs `(N, C, U, T, H, W)` with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 6 || inputs.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "dataset needs (N, C, U, T, H, W) inputs with N labels, got {:?} and {}",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_units(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// Samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.inputs.len() / self.len().max(1));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample {i} beyond {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.inputs.outer_slice(i));
        }
        Ok((
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Every sample with its unit axis reversed; labels unchanged.
    pub fn reversed_units(&self) -> Result<Dataset> {
        let u = self.num_units();
        let parts: Vec<Tensor<f32>> = (0..u)
            .rev()
            .map(|k| self.inputs.narrow(2, k, 1))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Dataset::new(Tensor::concat(&refs, 2)?, self.labels.clone())
    }

    /// Writes `{stem}_inputs.vt01` and `{stem}_labels.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_vt01(dir.join(format!("{stem}_inputs.vt01")), &self.inputs)?;
        let path = dir.join(format!("{stem}_labels.json"));
        let json = serde_json::to_string(&self.labels).expect("labels serialize");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Dataset> {
        let inputs = read_vt01(dir.join(format!("{stem}_inputs.vt01")))?;
        let path = dir.join(format!("{stem}_labels.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })?;
        Dataset::new(inputs, labels)
    }
}

fn d_units() -> usize {
    4
}
fn d_channels() -> usize {
    3
}
fn d_frames() -> usize {
    4
}
fn d_size() -> usize {
    16
}
fn d_noise() -> f64 {
    0.3
}
fn d_train() -> usize {
    2000
}
fn d_test() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderTaskSpec {
    #[serde(default = "d_units")]
    pub units: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// Square frame side.
    #[serde(default = "d_size")]
    pub size: usize,
    /// Motifs to draw from; `U + 2` when absent.
    #[serde(default)]
    pub library: Option<usize>,
    /// Std of the additive Gaussian pixel noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_test")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OrderTaskSpec {
    fn default() -> Self {
        OrderTaskSpec {
            units: d_units(),
            channels: d_channels(),
            frames: d_frames(),
            size: d_size(),
            library: None,
            noise: d_noise(),
            train_size: d_train(),
            test_size: d_test(),
            seed: 0,
        }
    }
}

impl OrderTaskSpec {
    pub fn library_size(&self) -> usize {
        self.library.unwrap_or(self.units + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units < 2 {
            return Err(Error::Config(format!(
                "order task needs at least 2 units, got {}",
                self.units
            )));
        }
        // With two units and two motifs a forward run is also a backward one.
        if self.library_size() < self.units.max(3) {
            return Err(Error::Config(format!(
                "motif library of {} cannot fill {} units with distinct, unambiguously ordered motifs",
                self.library_size(),
                self.units
            )));
        }
        if self.channels == 0 || self.frames == 0 || self.size < 8 || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "order task needs channels, frames > 0, size >= 8, noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Motif appearance: a colour (per-channel gain) and a temporal brightness
/// profile, both fixed by the motif index.
fn motif_gain(k: usize, channel: usize, channels: usize) -> f32 {
    let phase =
        2.0 * std::f32::consts::PI * (k as f32 * 0.61803 + channel as f32 / channels as f32);
    phase.cos()
}

fn motif_profile(k: usize, t: usize, frames: usize) -> f32 {
    if frames == 1 {
        return 1.0;
    }
    let x = t as f32 / (frames - 1) as f32;
    match k % 3 {
        0 => 1.0,
        1 => 0.5 + x,
        _ => 1.5 - x,
    }
}

struct Scene {
    y: usize,
    x: usize,
    side: usize,
    dy: isize,
    dx: isize,
    gain: f32,
}

fn draw_sample(spec: &OrderTaskSpec, motifs: &[usize], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (c, u, t, s) = (spec.channels, spec.units, spec.frames, spec.size);
    let side = rng.random_range(s / 4..=s / 2);
    let scene = Scene {
        y: rng.random_range(0..=s - side),
        x: rng.random_range(0..=s - side),
        side,
        dy: rng.random_range(-1i32..=1) as isize,
        dx: rng.random_range(-1i32..=1) as isize,
        gain: rng.random_range(0.8..1.2),
    };
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let mut out = vec![0.0f32; c * u * t * s * s];
    for (ui, &k) in motifs.iter().enumerate() {
        for ti in 0..t {
            let oy =
                (scene.y as isize + scene.dy * ti as isize).clamp(0, (s - side) as isize) as usize;
            let ox =
                (scene.x as isize + scene.dx * ti as isize).clamp(0, (s - side) as isize) as usize;
            for ch in 0..c {
                let level = scene.gain * motif_gain(k, ch, c) * motif_profile(k, ti, t);
                let base = ((ch * u + ui) * t + ti) * s * s;
                for y in oy..oy + scene.side {
                    out[base + y * s + ox..base + y * s + ox + scene.side].fill(level);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        out.iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
    }
    out
}

fn reverse_units(sample: &[f32], spec: &OrderTaskSpec) -> Vec<f32> {
    let (u, block) = (spec.units, spec.frames * spec.size * spec.size);
    let mut out = vec![0.0f32; sample.len()];
    for ch in 0..spec.channels {
        for ui in 0..u {
            let src = (ch * u + ui) * block;
            let dst = (ch * u + (u - 1 - ui)) * block;
            out[dst..dst + block].copy_from_slice(&sample[src..src + block]);
        }
    }
    out
}

/// `k, k+1, ..., k+U-1` modulo the library size, `k` uniform.
fn ascending_run(spec: &OrderTaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let library = spec.library_size();
    let start = rng.random_range(0..library);
    (0..spec.units).map(|i| (start + i) % library).collect()
}

fn make_split(spec: &OrderTaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "order-task split sizes must be even, got {n}"
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let motifs = ascending_run(spec, rng);
        let ascending = draw_sample(spec, &motifs, rng);
        let descending = reverse_units(&ascending, spec);
        data.extend(ascending);
        data.extend(descending);
        labels.extend([0, 1]);
    }
    let shape = vec![
        n,
        spec.channels,
        spec.units,
        spec.frames,
        spec.size,
        spec.size,
    ];
    Dataset::new(Tensor::new(shape, data)?, labels)
}

/// A depth-18 network cut to two stages of one block each, eight base
/// channels, with a `3x3x1x1` residual 4D block after res2.
pub fn order_task_network(spec: &OrderTaskSpec) -> NetworkSpec {
    NetworkSpec {
        depth: 18,
        num_classes: 2,
        units: spec.units,
        in_channels: spec.channels,
        width: 8,
        stages: 2,
        blocks: Some(vec![1, 1]),
        insertions: vec![Insertion {
            stage: 2,
            after_block: 0,
            kernel: [3, 3, 1, 1],
        }],
        extra_res4_block: false,
        seed: spec.seed,
    }
}

/// `(train, test)` splits, each made of unit-reversed pairs.
pub fn make_order_task(spec: &OrderTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = make_split(spec, spec.train_size, &mut rng)?;
    let test = make_split(spec, spec.test_size, &mut rng)?;
    Ok((train, test))
}

/// Single-unit clips labelled by motif index, `(N*U, C, 1, T, H, W)`; the
/// stage-one pretraining data for the order task.
pub fn motif_units(spec: &OrderTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let single = OrderTaskSpec {
        units: 1,
        ..spec.clone()
    };
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..spec.library_size());
        data.extend(draw_sample(&single, &[k], &mut rng));
        labels.push(k);
    }
    Dataset::new(
        Tensor::new(
            vec![n, spec.channels, 1, spec.frames, spec.size, spec.size],
            data,
        )?,
        labels,
    )
}
