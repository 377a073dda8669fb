//! Video-level inference: the network is cut at its first residual 4D block,
//! per-unit trunk features are computed once, and every selection of one
//! unit per section is scored by the 4D tail.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::sampling::near_equal_sections;
use crate::tensor::{Scalar, Tensor};

/// A network viewed as `n3d` (layers before the first 4D block, all
/// per-unit) followed by `n4d` (the rest, through the classifier).
pub struct SplitNetwork<'a, T> {
    net: &'a Network<T>,
    at: usize,
}

pub fn split_at_first_4d<T: Scalar>(net: &Network<T>) -> Result<SplitNetwork<'_, T>> {
    let at = net.first_4d_index().ok_or_else(|| {
        Error::Model("network has no 4D block to split at; use TSN averaging".into())
    })?;
    Ok(SplitNetwork { net, at })
}

impl<T: Scalar> SplitNetwork<'_, T> {
    /// Index of the first layer of `n4d`.
    pub fn split_index(&self) -> usize {
        self.at
    }

    pub fn units(&self) -> usize {
        self.net.spec().units
    }

    /// Per-unit trunk on `(B, C, T, H, W)`; any batch of units.
    pub fn n3d(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.infer_range(0..self.at, x, 1)
    }

    /// Tail on `(N*U_train, C', T, H', W')` features, returning `(N, classes)` logits.
    pub fn n4d(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.net
            .infer_range(self.at..self.net.layers().len(), features, self.units())
    }
}

/// One index per near-equal contiguous group of `0..u_infer`, all
/// combinations in lexicographic order.
pub fn enumerate_combinations(u_infer: usize, u_train: usize) -> Result<Vec<Vec<usize>>> {
    if u_train == 0 || u_infer < u_train {
        return Err(Error::invalid(format!(
            "cannot pick {u_train} units from {u_infer}"
        )));
    }
    let groups = near_equal_sections(u_infer, u_train)?;
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for g in &groups {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                g.clone().map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean logits, then one softmax.
    #[default]
    Logits,
    /// Mean of per-combination softmax outputs.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub combinations_used: usize,
    pub crops_used: usize,
}

impl Prediction {
    /// `(class, probability)` pairs, best first; ties keep the lower class.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.class_probs.len()).collect();
        idx.sort_by(|&a, &b| {
            self.class_probs[b]
                .total_cmp(&self.class_probs[a])
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .take(k)
            .map(|i| (i, self.class_probs[i]))
            .collect()
    }
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Accumulates per-combination logit rows in a fixed order.
struct ScoreSum {
    sum: Vec<f64>,
    count: usize,
    averaging: Averaging,
}

impl ScoreSum {
    fn new(classes: usize, averaging: Averaging) -> Self {
        ScoreSum {
            sum: vec![0.0; classes],
            count: 0,
            averaging,
        }
    }

    fn add<T: Scalar>(&mut self, logits: &Tensor<T>) {
        for row in logits.data().chunks(self.sum.len()) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let scores = match self.averaging {
                Averaging::Logits => row,
                Averaging::Probabilities => softmax64(&row),
            };
            self.sum.iter_mut().zip(scores).for_each(|(s, v)| *s += v);
            self.count += 1;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }

    fn finish(self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::invalid("no scores to average"));
        }
        let mean = self.mean();
        Ok(match self.averaging {
            Averaging::Logits => softmax64(&mean),
            Averaging::Probabilities => mean,
        })
    }
}

/// `(C, U, T, H, W) -> (U, C, T, H, W)`.
fn units_first<T: Scalar>(units: &Tensor<T>) -> Result<Tensor<T>> {
    if units.rank() != 5 {
        return Err(Error::shape(format!(
            "expected (C, U, T, H, W) units, got {:?}",
            units.shape()
        )));
    }
    units.permute_axes(0, 1)
}

/// Combinations scored per `n4d` call.
const COMBO_BATCH: usize = 8;

/// Score each crop's `(C, U_infer, T, H, W)` units with every combination and
/// average over combinations and crops.
pub fn v4d_infer<T: Scalar>(
    net: &Network<T>,
    crops: &[Tensor<T>],
    averaging: Averaging,
) -> Result<Prediction> {
    let split = split_at_first_4d(net)?;
    let u_train = split.units();
    let first = crops
        .first()
        .ok_or_else(|| Error::invalid("no crops to score"))?;
    let u_infer = first.shape().get(1).copied().unwrap_or(0);
    let combos = enumerate_combinations(u_infer, u_train)?;
    let mut acc = ScoreSum::new(net.spec().num_classes, averaging);
    for crop in crops {
        crop.expect_shape(first.shape())?;
        let features = split.n3d(&units_first(crop)?)?;
        for chunk in combos.chunks(COMBO_BATCH) {
            let rows: Vec<&[T]> = chunk
                .iter()
                .flatten()
                .map(|&u| features.outer_slice(u))
                .collect();
            let mut shape = features.shape().to_vec();
            shape[0] = rows.len();
            let batch = Tensor::new(shape, rows.concat())?;
            acc.add(&split.n4d(&batch)?);
        }
    }
    Ok(Prediction {
        class_probs: acc.finish()?,
        combinations_used: combos.len(),
        crops_used: crops.len(),
    })
}

/// Video-level temporal-segment baseline: mean per-unit logits of the
/// network with its 4D blocks removed, averaged over crops.
pub fn tsn_infer<T: Scalar>(
    net: &Network<T>,
    crops: &[Tensor<T>],
    averaging: Averaging,
) -> Result<Prediction> {
    if crops.is_empty() {
        return Err(Error::invalid("no crops to score"));
    }
    let trunk = net.without_4d_blocks();
    let classes = net.spec().num_classes;
    let mut acc = ScoreSum::new(classes, averaging);
    for crop in crops {
        let x = units_first(crop)?;
        let mut per_unit = ScoreSum::new(classes, Averaging::Logits);
        for u in 0..x.shape()[0] {
            per_unit.add(&trunk.infer_range(0..trunk.layers().len(), &x.narrow(0, u, 1)?, 1)?);
        }
        acc.add(&Tensor::new(vec![1, classes], per_unit.mean())?);
    }
    Ok(Prediction {
        class_probs: acc.finish()?,
        combinations_used: 1,
        crops_used: crops.len(),
    })
}

/// `heatmap[u,t,h,w] = sum_c fc[class, c] * features[c,u,t,h,w]`.
pub fn compute_cam3d<T: Scalar>(
    features: &Tensor<T>,
    fc_weights: &Tensor<T>,
    class_id: usize,
) -> Result<Tensor<f64>> {
    if features.rank() != 5
        || fc_weights.rank() != 2
        || fc_weights.shape()[1] != features.shape()[0]
    {
        return Err(Error::shape(format!(
            "CAM needs (C, U, T, H, W) features and (classes, C) weights, got {:?} and {:?}",
            features.shape(),
            fc_weights.shape()
        )));
    }
    let classes = fc_weights.shape()[0];
    if class_id >= classes {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {classes} classes"
        )));
    }
    let c = features.shape()[0];
    let inner = features.len() / c;
    let w = &fc_weights.data()[class_id * c..(class_id + 1) * c];
    let mut out = vec![0.0f64; inner];
    for (ch, plane) in features.data().chunks(inner).enumerate() {
        let wc = w[ch].as_f64();
        out.iter_mut()
            .zip(plane)
            .for_each(|(o, v)| *o += wc * v.as_f64());
    }
    Tensor::new(features.shape()[1..].to_vec(), out)
}

/// Trunk activations entering the head for one `(C, U, T, H, W)` clip set,
/// as `(C', U, T, H', W')`.
pub fn cam_features<T: Scalar>(net: &Network<T>, units: &Tensor<T>) -> Result<Tensor<T>> {
    let x = units_first(units)?;
    let u = x.shape()[0];
    let feats = net.infer_range(0..net.head_index(), &x, u)?;
    feats.permute_axes(0, 1)
}

/// Rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(t: &Tensor<f64>) -> Tensor<f64> {
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    t.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

fn write_csv(path: &Path, header: &str, unit: &[f64], t: usize, hw: usize) -> Result<()> {
    let mut s = format!("# {header}\n");
    for row in unit.chunks(hw).take(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One CSV per unit (rows = frames, columns = flattened pixels), raw and
/// min-max normalized, plus an optional grayscale PNG per frame.
pub fn export_cam(dir: &Path, heatmap: &Tensor<f64>, png: bool) -> Result<Vec<PathBuf>> {
    if heatmap.rank() != 4 {
        return Err(Error::shape(format!(
            "heatmap must be (U, T, H, W), got {:?}",
            heatmap.shape()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [u, t, h, w] = [
        heatmap.shape()[0],
        heatmap.shape()[1],
        heatmap.shape()[2],
        heatmap.shape()[3],
    ];
    let norm = min_max_normalize(heatmap);
    let mut written = Vec::new();
    for ui in 0..u {
        for (tag, src) in [("raw", heatmap), ("norm", &norm)] {
            let path = dir.join(format!("cam_u{ui}_{tag}.csv"));
            let header = format!("schema=v4d.cam/1 unit={ui} values={tag} shape={t}x{h}x{w}");
            write_csv(&path, &header, src.outer_slice(ui), t, h * w)?;
            written.push(path);
        }
        if png {
            for ti in 0..t {
                let plane = &norm.outer_slice(ui)[ti * h * w..(ti + 1) * h * w];
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([(plane[y as usize * w + x as usize] * 255.0).round() as u8])
                });
                let path = dir.join(format!("cam_u{ui}_t{ti}.png"));
                img.save(&path).map_err(|e| Error::Format {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
