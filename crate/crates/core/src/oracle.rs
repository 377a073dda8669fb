//! Brute-force reference implementations used as ground truth in tests.
//!
//! Nothing here calls into [`crate::ops`]: the loops are written out from the
//! operator definitions, always at `f64`, so agreement with the production
//! kernels is evidence rather than tautology.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};

/// Literal nested-loop 3D convolution on `(N, C, T, H, W)` with stride,
/// zero padding and dilation.
pub fn conv3d_reference(
    x: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &[f64],
    stride: [usize; 3],
    padding: [usize; 3],
    dilation: [usize; 3],
) -> Result<Tensor<f64>> {
    let (xs, ws) = (x.shape(), weights.shape());
    if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] || bias.len() != ws[0] {
        return Err(Error::shape(format!(
            "reference conv3d: input {xs:?}, weights {ws:?}"
        )));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let span = dilation[a] * (ws[2 + a] - 1) + 1;
        let padded = xs[2 + a] + 2 * padding[a];
        if span > padded {
            return Err(Error::shape(
                "reference conv3d: kernel exceeds padded input",
            ));
        }
        out_dims[a] = (padded - span) / stride[a] + 1;
    }
    let read = |b: usize, c: usize, t: isize, h: isize, w: isize| -> f64 {
        if t < 0
            || h < 0
            || w < 0
            || t as usize >= xs[2]
            || h as usize >= xs[3]
            || w as usize >= xs[4]
        {
            0.0
        } else {
            x.data()
                [(((b * cin + c) * xs[2] + t as usize) * xs[3] + h as usize) * xs[4] + w as usize]
        }
    };
    let mut out = Tensor::zeros(vec![n, cout, out_dims[0], out_dims[1], out_dims[2]]);
    let mut k = 0;
    for b in 0..n {
        for j in 0..cout {
            for t in 0..out_dims[0] {
                for h in 0..out_dims[1] {
                    for w in 0..out_dims[2] {
                        let mut acc = bias[j];
                        for c in 0..cin {
                            for p in 0..ws[2] {
                                for q in 0..ws[3] {
                                    for r in 0..ws[4] {
                                        let it = (t * stride[0] + p * dilation[0]) as isize
                                            - padding[0] as isize;
                                        let ih = (h * stride[1] + q * dilation[1]) as isize
                                            - padding[1] as isize;
                                        let iw = (w * stride[2] + r * dilation[2]) as isize
                                            - padding[2] as isize;
                                        let wv = weights.data()
                                            [(((j * cin + c) * ws[2] + p) * ws[3] + q) * ws[4] + r];
                                        acc += wv * read(b, c, it, ih, iw);
                                    }
                                }
                            }
                        }
                        out.data_mut()[k] = acc;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Literal 4D convolution:
/// `o[j,u,t,h,w] = b[j] + sum_{c,s,p,q,r} W[j,c,s,p,q,r] * v[c,u+s,t+p,h+q,w+r]`
/// over a zero-padded `v`, one loop per index, "same" padding on all four axes.
pub fn conv4d_reference(
    v: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &[f64],
) -> Result<Tensor<f64>> {
    let (vs, ws) = (v.shape(), weights.shape());
    if vs.len() != 6 || ws.len() != 6 || vs[1] != ws[1] || bias.len() != ws[0] {
        return Err(Error::shape(format!(
            "reference conv4d: input {vs:?}, weights {ws:?}"
        )));
    }
    if ws[2..].iter().any(|&k| k % 2 == 0) {
        return Err(Error::invalid("reference conv4d needs odd kernel extents"));
    }
    let (n, cin, cout) = (vs[0], vs[1], ws[0]);
    let (nu, nt, nh, nw) = (vs[2], vs[3], vs[4], vs[5]);
    let (ks, kp, kq, kr) = (ws[2], ws[3], ws[4], ws[5]);
    let pads = [
        (ks / 2) as isize,
        (kp / 2) as isize,
        (kq / 2) as isize,
        (kr / 2) as isize,
    ];
    let mut out = Tensor::zeros(vec![n, cout, nu, nt, nh, nw]);
    for b in 0..n {
        for j in 0..cout {
            for u in 0..nu {
                for t in 0..nt {
                    for h in 0..nh {
                        for w in 0..nw {
                            let mut acc = bias[j];
                            for c in 0..cin {
                                for s in 0..ks {
                                    for p in 0..kp {
                                        for q in 0..kq {
                                            for r in 0..kr {
                                                let iu = (u + s) as isize - pads[0];
                                                let it = (t + p) as isize - pads[1];
                                                let ih = (h + q) as isize - pads[2];
                                                let iw = (w + r) as isize - pads[3];
                                                if iu < 0 || it < 0 || ih < 0 || iw < 0 {
                                                    continue;
                                                }
                                                let (iu, it, ih, iw) = (
                                                    iu as usize,
                                                    it as usize,
                                                    ih as usize,
                                                    iw as usize,
                                                );
                                                if iu >= nu || it >= nt || ih >= nh || iw >= nw {
                                                    continue;
                                                }
                                                let wv = weights.data()[(((((j * cin + c) * ks
                                                    + s)
                                                    * kp
                                                    + p)
                                                    * kq
                                                    + q)
                                                    * kr)
                                                    + r];
                                                let vv = v.data()[((((b * cin + c) * nu + iu)
                                                    * nt
                                                    + it)
                                                    * nh
                                                    + ih)
                                                    * nw
                                                    + iw];
                                                acc += wv * vv;
                                            }
                                        }
                                    }
                                }
                            }
                            let off = ((((b * cout + j) * nu + u) * nt + t) * nh + h) * nw + w;
                            out.data_mut()[off] = acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The `S x 1 x 1 x 1` 4D convolution seen as a temporally dilated 3D
/// convolution: units are laid end to end along time, giving
/// `(C, U*T, H, W)`, convolved with an `S x 1 x 1` kernel of dilation `T`
/// and temporal padding `T*(S-1)/2`, then cut back into units.
///
/// `v` is `(C, U, T, H, W)`, `weights` is `(C_out, C, S, 1, 1, 1)`.
pub fn dilated_conv3d_reference(
    v: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &[f64],
) -> Result<Tensor<f64>> {
    let (vs, ws) = (v.shape(), weights.shape());
    if vs.len() != 5 || ws.len() != 6 {
        return Err(Error::shape(format!(
            "dilated reference: input {vs:?}, weights {ws:?}"
        )));
    }
    if ws[3..] != [1, 1, 1] || ws[2] % 2 == 0 {
        return Err(Error::invalid(format!(
            "dilated reference needs an odd S x 1 x 1 x 1 kernel, got {ws:?}"
        )));
    }
    let (c, u, t, h, w) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
    let (cout, s) = (ws[0], ws[2]);
    // (C, U, T, H, W) is already (C, U*T, H, W) in row-major order.
    let sequence = Tensor::new(vec![1, c, u * t, h, w], v.data().to_vec())?;
    let kernel = Tensor::new(vec![cout, c, s, 1, 1], weights.data().to_vec())?;
    let out = conv3d_reference(
        &sequence,
        &kernel,
        bias,
        [1, 1, 1],
        [t * (s - 1) / 2, 0, 0],
        [t, 1, 1],
    )?;
    Tensor::new(vec![cout, u, t, h, w], out.into_data())
}

/// Segment-averaged 3D baseline: each unit of `(N, C, U, T, H, W)` runs
/// alone through `net` with its 4D blocks removed, and the per-unit logits
/// are averaged.
pub fn tsn_forward_reference<T: Scalar>(net: &Network<T>, units: &Tensor<T>) -> Result<Tensor<T>> {
    if units.rank() != 6 {
        return Err(Error::shape(format!(
            "expected (N,C,U,T,H,W), got {:?}",
            units.shape()
        )));
    }
    let trunk = net.without_4d_blocks();
    let u = units.shape()[2];
    let mut total: Option<Tensor<T>> = None;
    for i in 0..u {
        let logits = trunk.infer(&units.narrow(2, i, 1)?)?;
        total = Some(match total {
            None => logits,
            Some(acc) => acc.add(&logits)?,
        });
    }
    Ok(total
        .expect("at least one unit")
        .scale(T::one() / T::from_usize(u)))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn numerical_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite function value near element {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
    /// Index of the worst element.
    pub argmax: Vec<usize>,
    /// Elements compared.
    pub checked: usize,
    pub step: f64,
    pub tolerance: f64,
    pub dtype: String,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Compare an analytic gradient against a numerical one and record the
    /// worst element.
    pub fn compare(
        &mut self,
        name: &str,
        analytic: &Tensor<f64>,
        numeric: &Tensor<f64>,
        step: f64,
        tolerance: f64,
    ) -> Result<f64> {
        analytic.expect_shape(numeric.shape())?;
        let pairs = (0..analytic.len())
            .map(|i| (analytic.unravel(i), analytic.data()[i], numeric.data()[i]));
        Ok(self.compare_pairs(name, pairs, step, tolerance))
    }

    /// Same as [`compare`](Self::compare) for a sample of elements given as
    /// `(index, analytic, numeric)`.
    pub fn compare_pairs(
        &mut self,
        name: &str,
        pairs: impl IntoIterator<Item = (Vec<usize>, f64, f64)>,
        step: f64,
        tolerance: f64,
    ) -> f64 {
        let (mut worst, mut at, mut checked) = (0.0f64, Vec::new(), 0);
        for (idx, a, n) in pairs {
            let e = relative_error(a, n);
            if e > worst || checked == 0 {
                worst = e;
                at = idx;
            }
            checked += 1;
        }
        self.entries.push(GradCheckEntry {
            name: name.to_string(),
            max_relative_error: worst,
            argmax: at,
            checked,
            step,
            tolerance,
            dtype: "f64".into(),
        });
        worst
    }

    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(GradCheckEntry::passed)
    }
}
