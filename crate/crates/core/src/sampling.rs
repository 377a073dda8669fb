//! Whole-video sampling: the video is cut into `U` near-equal sections and
//! one short clip (an action unit of `T` strided frames) is drawn from each.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_vt01, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Test,
}

/// Per-channel `(v - mean) / std` applied to `[0, 1]` pixel values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn imagenet() -> Self {
        Normalization {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::imagenet()
    }
}

fn d_clip_len() -> usize {
    32
}
fn d_frames() -> usize {
    4
}
fn d_stride() -> usize {
    8
}
fn d_test_crop() -> usize {
    256
}
fn d_train_crop() -> usize {
    224
}
fn d_norm() -> Option<Normalization> {
    Some(Normalization::imagenet())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub units: usize,
    #[serde(default = "d_clip_len")]
    pub clip_len: usize,
    #[serde(default = "d_frames")]
    pub frames_per_unit: usize,
    #[serde(default = "d_stride")]
    pub frame_stride: usize,
    pub mode: SampleMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_test_crop")]
    pub test_crop: usize,
    #[serde(default = "d_train_crop")]
    pub train_crop: usize,
    /// `None` feeds raw `[0, 1]` values.
    #[serde(default = "d_norm")]
    pub normalization: Option<Normalization>,
}

impl SamplingConfig {
    pub fn new(units: usize, mode: SampleMode) -> Self {
        SamplingConfig {
            units,
            clip_len: d_clip_len(),
            frames_per_unit: d_frames(),
            frame_stride: d_stride(),
            mode,
            seed: 0,
            test_crop: d_test_crop(),
            train_crop: d_train_crop(),
            normalization: d_norm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(Error::Config("sampling needs at least one unit".into()));
        }
        if self.frames_per_unit == 0 || self.frame_stride == 0 {
            return Err(Error::Config(
                "frames_per_unit and frame_stride must be positive".into(),
            ));
        }
        if (self.frames_per_unit - 1) * self.frame_stride >= self.clip_len {
            return Err(Error::Config(format!(
                "{} frames at stride {} do not fit a {}-frame clip",
                self.frames_per_unit, self.frame_stride, self.clip_len
            )));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != n.std.len() || n.std.iter().any(|s| *s <= 0.0) {
                return Err(Error::Config(
                    "normalization needs matching mean/std with positive std".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn crop_size(&self) -> usize {
        match self.mode {
            SampleMode::Train => self.train_crop,
            SampleMode::Test => self.test_crop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// `U` lists of `T` absolute frame indices.
    pub units: Vec<Vec<usize>>,
    pub crops: Vec<CropWindow>,
    pub mode: SampleMode,
}

/// Split `[0, len)` into `parts` contiguous ranges whose sizes differ by at
/// most one; the first `len % parts` ranges are the longer ones.
pub fn near_equal_sections(len: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::invalid("cannot split into zero sections"));
    }
    let (base, extra) = (len / parts, len % parts);
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect())
}

fn plan_frames(
    video_length: usize,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if video_length == 0 {
        return Err(Error::invalid("video has no frames"));
    }
    cfg.validate()?;
    let sections = near_equal_sections(video_length, cfg.units)?;
    Ok(sections
        .iter()
        .map(|sec| {
            let slack = sec.len().saturating_sub(cfg.clip_len);
            let start = match cfg.mode {
                SampleMode::Test => sec.start + slack / 2,
                SampleMode::Train => sec.start + rng.random_range(0..=slack),
            };
            // clamp to the section's last frame (the video's, for empty sections)
            let last = sec.end.max(sec.start + 1).min(video_length) - 1;
            (0..cfg.frames_per_unit)
                .map(|k| (start + k * cfg.frame_stride).min(last))
                .collect()
        })
        .collect())
}

/// Frame indices only; `crops` is left empty.
pub fn plan_units(video_length: usize, cfg: &SamplingConfig) -> Result<SamplingPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(SamplingPlan {
        units: plan_frames(video_length, cfg, &mut rng)?,
        crops: Vec::new(),
        mode: cfg.mode,
    })
}

/// Test: three windows along the long side (left/center/right, or
/// top/center/bottom for portrait frames). Train: one random window.
pub fn spatial_crops<R: Rng>(
    frame_h: usize,
    frame_w: usize,
    mode: SampleMode,
    size: usize,
    rng: &mut R,
) -> Result<Vec<CropWindow>> {
    if size == 0 || frame_h < size || frame_w < size {
        return Err(Error::invalid(format!(
            "{frame_h}x{frame_w} frame cannot hold a {size}x{size} crop"
        )));
    }
    let (sy, sx) = (frame_h - size, frame_w - size);
    Ok(match mode {
        SampleMode::Test if frame_w >= frame_h => [0, sx / 2, sx]
            .iter()
            .map(|&x| CropWindow { y: sy / 2, x, size })
            .collect(),
        SampleMode::Test => [0, sy / 2, sy]
            .iter()
            .map(|&y| CropWindow { y, x: sx / 2, size })
            .collect(),
        SampleMode::Train => vec![CropWindow {
            y: rng.random_range(0..=sy),
            x: rng.random_range(0..=sx),
            size,
        }],
    })
}

/// Frame indices plus crop windows, from one seeded stream.
pub fn plan_video(
    video_length: usize,
    frame_h: usize,
    frame_w: usize,
    cfg: &SamplingConfig,
) -> Result<SamplingPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let units = plan_frames(video_length, cfg, &mut rng)?;
    let crops = spatial_crops(frame_h, frame_w, cfg.mode, cfg.crop_size(), &mut rng)?;
    Ok(SamplingPlan {
        units,
        crops,
        mode: cfg.mode,
    })
}

/// Read-only access to decoded frames as `(C, H, W)` values in `[0, 1]`.
pub trait FrameSource: Sync {
    fn num_frames(&self) -> usize;
    fn channels(&self) -> usize;
    /// `(height, width)`.
    fn frame_size(&self) -> (usize, usize);
    fn frame(&self, index: usize) -> Result<Tensor<f32>>;
}

/// A single `(C, L, H, W)` VT01 tensor.
pub struct TensorSource {
    video: Tensor<f32>,
}

impl TensorSource {
    pub fn new(video: Tensor<f32>) -> Result<Self> {
        if video.rank() != 4 || video.shape()[1] == 0 {
            return Err(Error::shape(format!(
                "video tensor must be (C, L, H, W), got {:?}",
                video.shape()
            )));
        }
        Ok(TensorSource { video })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_vt01(path)?)
    }
}

impl FrameSource for TensorSource {
    fn num_frames(&self) -> usize {
        self.video.shape()[1]
    }

    fn channels(&self) -> usize {
        self.video.shape()[0]
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.video.shape()[2], self.video.shape()[3])
    }

    fn frame(&self, index: usize) -> Result<Tensor<f32>> {
        if index >= self.num_frames() {
            return Err(Error::invalid(format!(
                "frame {index} beyond {} frames",
                self.num_frames()
            )));
        }
        self.video.narrow(1, index, 1)?.reshape(vec![
            self.channels(),
            self.frame_size().0,
            self.frame_size().1,
        ])
    }
}

/// Numbered PPM/PNG frames in lexicographic file-name order, optionally
/// resized so the short side has a given length.
pub struct DirectorySource {
    files: Vec<PathBuf>,
    short_side: Option<u32>,
    size: (usize, usize),
}

impl DirectorySource {
    pub fn open(dir: impl AsRef<Path>, short_side: Option<u32>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("ppm" | "png")) {
                files.push(path);
            }
        }
        files.sort();
        let first = files.first().ok_or_else(|| Error::Format {
            path: dir.to_path_buf(),
            message: "no .ppm or .png frames".into(),
        })?;
        let mut src = DirectorySource {
            files: files.clone(),
            short_side,
            size: (0, 0),
        };
        let f = src.load(first)?;
        src.size = (f.height() as usize, f.width() as usize);
        Ok(src)
    }

    fn load(&self, path: &Path) -> Result<image::RgbImage> {
        let img = image::open(path)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        Ok(match self.short_side {
            Some(s) => {
                let (w, h) = img.dimensions();
                let scale = s as f64 / w.min(h) as f64;
                let (nw, nh) = (
                    (w as f64 * scale).round() as u32,
                    (h as f64 * scale).round() as u32,
                );
                image::imageops::resize(
                    &img,
                    nw.max(1),
                    nh.max(1),
                    image::imageops::FilterType::Triangle,
                )
            }
            None => img,
        })
    }
}

impl FrameSource for DirectorySource {
    fn num_frames(&self) -> usize {
        self.files.len()
    }

    fn channels(&self) -> usize {
        3
    }

    fn frame_size(&self) -> (usize, usize) {
        self.size
    }

    fn frame(&self, index: usize) -> Result<Tensor<f32>> {
        let path = self.files.get(index).ok_or_else(|| {
            Error::invalid(format!("frame {index} beyond {} frames", self.files.len()))
        })?;
        let img = self.load(path)?;
        let (h, w) = (img.height() as usize, img.width() as usize);
        if (h, w) != self.size {
            return Err(Error::Format {
                path: path.clone(),
                message: format!("frame is {h}x{w}, expected {}x{}", self.size.0, self.size.1),
            });
        }
        Ok(Tensor::from_fn(vec![3, h, w], |i| {
            img.get_pixel(i[2] as u32, i[1] as u32)[i[0]] as f32 / 255.0
        }))
    }
}

/// Cut `crop` out of every planned frame: `(C, U, T, size, size)`.
pub fn gather_units(
    src: &dyn FrameSource,
    plan: &SamplingPlan,
    crop: CropWindow,
    normalization: Option<&Normalization>,
) -> Result<Tensor<f32>> {
    let c = src.channels();
    let (fh, fw) = src.frame_size();
    if crop.y + crop.size > fh || crop.x + crop.size > fw {
        return Err(Error::invalid(format!(
            "crop {crop:?} outside {fh}x{fw} frame"
        )));
    }
    if let Some(n) = normalization {
        if n.mean.len() != c {
            return Err(Error::Config(format!(
                "normalization has {} channels, video has {c}",
                n.mean.len()
            )));
        }
    }
    let u = plan.units.len();
    let t = plan.units.first().map_or(0, Vec::len);
    if u == 0 || plan.units.iter().any(|f| f.len() != t) {
        return Err(Error::invalid(
            "plan units must be non-empty and equally long",
        ));
    }
    let mut frames: HashMap<usize, Tensor<f32>> = HashMap::new();
    for &idx in plan.units.iter().flatten() {
        if let std::collections::hash_map::Entry::Vacant(e) = frames.entry(idx) {
            e.insert(src.frame(idx)?);
        }
    }
    let s = crop.size;
    let mut out = Tensor::zeros(vec![c, u, t, s, s]);
    let strides = out.strides();
    let data = out.data_mut();
    for (ui, unit) in plan.units.iter().enumerate() {
        for (ti, idx) in unit.iter().enumerate() {
            let f = &frames[idx];
            for ch in 0..c {
                let (m, sd) = normalization.map_or((0.0, 1.0), |n| (n.mean[ch], n.std[ch]));
                for y in 0..s {
                    let row = &f.data()[(ch * fh + crop.y + y) * fw + crop.x..][..s];
                    let o = ch * strides[0] + ui * strides[1] + ti * strides[2] + y * strides[3];
                    for (dst, &v) in data[o..o + s].iter_mut().zip(row) {
                        *dst = (v - m) / sd;
                    }
                }
            }
        }
    }
    Ok(out)
}
