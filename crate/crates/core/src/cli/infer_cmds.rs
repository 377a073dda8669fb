use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    cam_features, compute_cam3d, export_cam, tsn_infer, v4d_infer, Averaging, Prediction,
};
use crate::network::Network;
use crate::sampling::{
    gather_units, plan_video, DirectorySource, FrameSource, SampleMode, SamplingConfig,
    TensorSource,
};
use crate::tensor::{read_vt01, Tensor};
use crate::training::{argmax_rows, load_checkpoint, read_manifest};

use super::{base_config, create_dir, write_config, write_json, Globals};

pub const PREDICTION_SCHEMA: &str = "v4d.prediction/1";

/// Flags shared by commands that read a video.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Network checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A `(C, L, H, W)` VT01 video, a directory of frames, or an already
    /// sampled `(C, U, T, H, W)` VT01 clip set.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Square crop side.
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub frames_per_unit: Option<usize>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// Feed raw `[0, 1]` pixels.
    #[arg(long)]
    pub no_normalize: bool,
    /// Resize directory frames so the short side has this length.
    #[arg(long)]
    pub short_side: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn apply_input(
    a: &InputArgs,
    checkpoint: &mut PathBuf,
    input: &mut PathBuf,
    s: &mut SamplingConfig,
) {
    if let Some(c) = &a.checkpoint {
        *checkpoint = c.clone();
    }
    if let Some(i) = &a.input {
        *input = i.clone();
    }
    s.test_crop = a.crop_size.unwrap_or(s.test_crop);
    s.frames_per_unit = a.frames_per_unit.unwrap_or(s.frames_per_unit);
    s.frame_stride = a.frame_stride.unwrap_or(s.frame_stride);
    s.clip_len = a.clip_len.unwrap_or(s.clip_len);
    s.seed = a.seed.unwrap_or(s.seed);
    if a.no_normalize {
        s.normalization = None;
    }
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{flag} is required")));
    }
    Ok(())
}

/// One `(C, U, T, S, S)` tensor per spatial crop.
fn load_clips(
    input: &Path,
    sampling: &SamplingConfig,
    short_side: Option<u32>,
    crops: usize,
) -> Result<Vec<Tensor<f32>>> {
    let source: Box<dyn FrameSource> = if input.is_dir() {
        Box::new(DirectorySource::open(input, short_side)?)
    } else {
        let t = read_vt01::<f32>(input)?;
        match t.rank() {
            5 => return Ok(vec![t]),
            4 => Box::new(TensorSource::new(t)?),
            _ => {
                return Err(Error::shape(format!(
                    "input must be a (C, L, H, W) video or (C, U, T, H, W) clips, got {:?}",
                    t.shape()
                )))
            }
        }
    };
    sampling.validate()?;
    let (h, w) = source.frame_size();
    let plan = plan_video(source.num_frames(), h, w, sampling)?;
    let windows = match crops {
        3 => plan.crops.clone(),
        1 => vec![plan.crops[plan.crops.len() / 2]],
        n => return Err(Error::Config(format!("crops must be 1 or 3, got {n}"))),
    };
    windows
        .into_iter()
        .map(|c| gather_units(source.as_ref(), &plan, c, sampling.normalization.as_ref()))
        .collect()
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    /// Units sampled from the video; the trained unit count by default.
    #[arg(long)]
    pub units_infer: Option<usize>,
    /// 1 (center) or 3 spatial crops.
    #[arg(long)]
    pub crops: Option<usize>,
    /// logits or probabilities.
    #[arg(long)]
    pub averaging: Option<String>,
    /// Average per-unit scores of the network with its 4D blocks removed.
    #[arg(long)]
    pub tsn_baseline: bool,
    /// Output directory; the prediction is printed when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub crops: usize,
    pub averaging: Averaging,
    #[serde(default)]
    pub tsn_baseline: bool,
    /// `units` is the number of units sampled at inference.
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub short_side: Option<u32>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub schema: String,
    /// `v4d` for combinatorial scoring, `tsn` for per-unit averaging.
    pub method: String,
    pub class_probs: Vec<f64>,
    pub top5: Vec<RankedClass>,
    pub combinations_used: usize,
    pub crops_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

fn parse_averaging(s: &str) -> Result<Averaging> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        Error::Config(format!(
            "averaging must be logits or probabilities, got {s:?}"
        ))
    })
}

fn resolve_infer(a: &InferArgs) -> Result<InferConfig> {
    let mut cfg = base_config(a.config.as_ref(), "infer", || {
        Ok(InferConfig {
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            crops: 3,
            averaging: Averaging::Logits,
            tsn_baseline: false,
            sampling: SamplingConfig::new(0, SampleMode::Test),
            short_side: None,
            out: None,
        })
    })?;
    apply_input(
        &a.input,
        &mut cfg.checkpoint,
        &mut cfg.input,
        &mut cfg.sampling,
    );
    cfg.short_side = a.input.short_side.or(cfg.short_side);
    if let Some(u) = a.units_infer {
        cfg.sampling.units = u;
    }
    if let Some(c) = a.crops {
        cfg.crops = c;
    }
    if let Some(s) = &a.averaging {
        cfg.averaging = parse_averaging(s)?;
    }
    cfg.tsn_baseline |= a.tsn_baseline;
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.input, "--input")?;
    cfg.sampling.mode = SampleMode::Test;
    if cfg.sampling.units == 0 {
        cfg.sampling.units = read_manifest(&cfg.checkpoint)?.spec.units;
    }
    Ok(cfg)
}

pub fn predict_report(
    net: &Network<f32>,
    clips: &[Tensor<f32>],
    cfg: &InferConfig,
) -> Result<(Prediction, &'static str)> {
    if cfg.tsn_baseline || net.num_4d_blocks() == 0 {
        Ok((tsn_infer(net, clips, cfg.averaging)?, "tsn"))
    } else {
        Ok((v4d_infer(net, clips, cfg.averaging)?, "v4d"))
    }
}

pub(super) fn infer(a: InferArgs, g: Globals) -> Result<()> {
    let cfg = resolve_infer(&a)?;
    let start = Instant::now();
    let net = load_checkpoint::<f32>(&cfg.checkpoint)?;
    let clips = load_clips(&cfg.input, &cfg.sampling, cfg.short_side, cfg.crops)?;
    let (pred, method) = predict_report(&net, &clips, &cfg)?;
    let report = PredictionReport {
        schema: PREDICTION_SCHEMA.into(),
        method: method.into(),
        top5: pred
            .top_k(5)
            .into_iter()
            .map(|(class, prob)| RankedClass { class, prob })
            .collect(),
        class_probs: pred.class_probs,
        combinations_used: pred.combinations_used,
        crops_used: pred.crops_used,
        timing: (!g.deterministic).then(|| Timing {
            seconds: start.elapsed().as_secs_f64(),
        }),
    };
    match &cfg.out {
        Some(dir) => {
            create_dir(dir)?;
            write_config(dir, "infer", &cfg)?;
            write_json(&dir.join("prediction.json"), &report)?;
            let best = &report.top5[0];
            println!(
                "class {} ({:.4}) from {} combinations",
                best.class, best.prob, report.combinations_used
            );
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("json serializes")
        ),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    /// Units sampled from a video input.
    #[arg(long)]
    pub units: Option<usize>,
    /// Class to explain; the predicted class by default.
    #[arg(long = "class")]
    pub class_id: Option<usize>,
    /// Also write one grayscale PNG per unit and frame.
    #[arg(long)]
    pub png: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamConfig {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    #[serde(default)]
    pub class_id: Option<usize>,
    #[serde(default)]
    pub png: bool,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub short_side: Option<u32>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
struct CamReport {
    schema: &'static str,
    class_id: usize,
    /// `(U, T, H, W)`.
    shape: Vec<usize>,
    files: Vec<String>,
}

pub(super) fn cam(a: CamArgs, _g: Globals) -> Result<()> {
    let mut cfg = base_config(a.config.as_ref(), "cam", || {
        Ok(CamConfig {
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            class_id: None,
            png: false,
            sampling: SamplingConfig::new(0, SampleMode::Test),
            short_side: None,
            out: PathBuf::new(),
        })
    })?;
    apply_input(
        &a.input,
        &mut cfg.checkpoint,
        &mut cfg.input,
        &mut cfg.sampling,
    );
    cfg.short_side = a.input.short_side.or(cfg.short_side);
    cfg.sampling.units = a.units.unwrap_or(cfg.sampling.units);
    cfg.class_id = a.class_id.or(cfg.class_id);
    cfg.png |= a.png;
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.input, "--input")?;
    require(&cfg.out, "--out")?;
    cfg.sampling.mode = SampleMode::Test;
    if cfg.sampling.units == 0 {
        cfg.sampling.units = read_manifest(&cfg.checkpoint)?.spec.units;
    }

    let net = load_checkpoint::<f32>(&cfg.checkpoint)?;
    let clip = load_clips(&cfg.input, &cfg.sampling, cfg.short_side, 1)?.remove(0);
    let class_id = match cfg.class_id {
        Some(c) => c,
        None => {
            let mut batch = vec![1];
            batch.extend_from_slice(clip.shape());
            argmax_rows(&net.infer(&clip.clone().reshape(batch)?)?)[0]
        }
    };
    let features = cam_features(&net, &clip)?;
    let heat = compute_cam3d(&features, &net.head().weights, class_id)?;
    create_dir(&cfg.out)?;
    write_config(&cfg.out, "cam", &cfg)?;
    let files = export_cam(&cfg.out, &heat, cfg.png)?;
    let report = CamReport {
        schema: "v4d.cam/1",
        class_id,
        shape: heat.shape().to_vec(),
        files: files
            .iter()
            .filter_map(|p| p.file_name())
            .map(|f| f.to_string_lossy().into_owned())
            .collect(),
    };
    write_json(&cfg.out.join("cam.json"), &report)?;
    println!(
        "class {class_id}: {} files in {}",
        report.files.len(),
        cfg.out.display()
    );
    Ok(())
}
