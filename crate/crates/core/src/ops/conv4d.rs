//! 4D convolution over `(N, C, U, T, H, W)`.
//!
//! Two independent routes compute the same operator:
//!
//! * [`conv4d_forward_direct`] unrolls the whole `(S, P, Q, R)` receptive
//!   field into one matrix and multiplies once.
//! * [`conv4d_forward_decomposed`] sums `S` ordinary 3D convolutions, one
//!   per kernel slice along the unit axis, each applied to every unit and
//!   shifted along `U`. This is the production path.
//!
//! Both use zero "same" padding on all four axes and stride 1.

use crate::error::{Error, Result};
use crate::ops::conv3d::{conv3d_backward, conv3d_forward, Conv3dParams, ConvGrads};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv4dParams<T> {
    /// `(C_out, C_in, S, P, Q, R)`
    pub weights: Tensor<T>,
    /// `(C_out)`
    pub bias: Tensor<T>,
    /// Zero padding on `(U, T, H, W)`.
    pub padding: [usize; 4],
}

/// The kernel shapes used in practice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelForm {
    /// `k x 1 x 1 x 1`: mixes units only.
    UnitOnly,
    /// `k x k x 1 x 1`: mixes units and frames.
    UnitTime,
    /// `k x k x k x k`
    Full,
    Other,
}

impl<T: Scalar> Conv4dParams<T> {
    /// Same-padded 4D convolution; every kernel extent must be odd.
    pub fn same(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.rank() != 6 {
            return Err(Error::shape(format!(
                "conv4d weights must be rank 6, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(format!(
                "conv4d bias {:?} does not match {} output channels",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        let k = &weights.shape()[2..];
        if k.iter().any(|&e| e % 2 == 0) {
            return Err(Error::invalid(format!(
                "same padding needs odd kernel extents, got {k:?}"
            )));
        }
        let padding = [
            (k[0] - 1) / 2,
            (k[1] - 1) / 2,
            (k[2] - 1) / 2,
            (k[3] - 1) / 2,
        ];
        Ok(Conv4dParams {
            weights,
            bias,
            padding,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(cout: usize, cin: usize, kernel: [usize; 4]) -> Result<Self> {
        Self::same(
            Tensor::zeros(vec![cout, cin, kernel[0], kernel[1], kernel[2], kernel[3]]),
            Tensor::zeros(vec![cout]),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> [usize; 4] {
        let s = self.weights.shape();
        [s[2], s[3], s[4], s[5]]
    }

    pub fn form(&self) -> KernelForm {
        match self.kernel() {
            [_, 1, 1, 1] => KernelForm::UnitOnly,
            [s, p, 1, 1] if s == p => KernelForm::UnitTime,
            [s, p, q, r] if s == p && p == q && q == r => KernelForm::Full,
            _ => KernelForm::Other,
        }
    }

    /// Kernel slice `s` along the unit axis as a same-padded 3D convolution
    /// without bias.
    pub fn unit_slice(&self, s: usize) -> Result<Conv3dParams<T>> {
        let [ks, kp, kq, kr] = self.kernel();
        if s >= ks {
            return Err(Error::invalid(format!("unit slice {s} out of range {ks}")));
        }
        let (cout, cin) = (self.out_channels(), self.in_channels());
        let vol = kp * kq * kr;
        let mut data = Vec::with_capacity(cout * cin * vol);
        let w = self.weights.data();
        for j in 0..cout {
            for c in 0..cin {
                let base = ((j * cin + c) * ks + s) * vol;
                data.extend_from_slice(&w[base..base + vol]);
            }
        }
        Conv3dParams::new(
            Tensor::new(vec![cout, cin, kp, kq, kr], data)?,
            Tensor::zeros(vec![cout]),
            [1, 1, 1],
            [self.padding[1], self.padding[2], self.padding[3]],
        )
    }

    fn check_input(&self, v: &Tensor<T>) -> Result<[usize; 6]> {
        if v.rank() != 6 {
            return Err(Error::shape(format!(
                "conv4d input must be (N,C,U,T,H,W), got {:?}",
                v.shape()
            )));
        }
        if v.shape()[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv4d input has {} channels, weights expect {}",
                v.shape()[1],
                self.in_channels()
            )));
        }
        let s = v.shape();
        Ok([s[0], s[1], s[2], s[3], s[4], s[5]])
    }
}

/// Input unit feeding output unit `u` through kernel slice `s`, if inside
/// the unpadded range.
#[inline]
fn source_unit(u: usize, s: usize, pad: usize, units: usize) -> Option<usize> {
    let i = (u + s) as isize - pad as isize;
    (i >= 0 && (i as usize) < units).then_some(i as usize)
}

/// The 4D sum evaluated literally: one unrolled receptive field per output position,
/// contracted against the flattened kernel in a single product.
pub fn conv4d_forward_direct<T: Scalar>(v: &Tensor<T>, p: &Conv4dParams<T>) -> Result<Tensor<T>> {
    let [n, cin, u, t, h, w] = p.check_input(v)?;
    let [ks, kp, kq, kr] = p.kernel();
    let [pu, pt, ph, pw] = p.padding;
    let cout = p.out_channels();
    let positions = u * t * h * w;
    let rows = cin * ks * kp * kq * kr;
    let mut out = Tensor::zeros(vec![n, cout, u, t, h, w]);
    let mut col = vec![T::zero(); rows * positions];
    let at = |o: usize, k: usize, pad: usize, ext: usize| -> Option<usize> {
        let i = (o + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < ext).then_some(i as usize)
    };
    for item in 0..n {
        let vn = v.outer_slice(item);
        let mut row = 0;
        for c in 0..cin {
            for s in 0..ks {
                for dp in 0..kp {
                    for dq in 0..kq {
                        for dr in 0..kr {
                            let dst = &mut col[row * positions..(row + 1) * positions];
                            let mut pos = 0;
                            for ou in 0..u {
                                for ot in 0..t {
                                    for oh in 0..h {
                                        for ow in 0..w {
                                            dst[pos] = match (
                                                at(ou, s, pu, u),
                                                at(ot, dp, pt, t),
                                                at(oh, dq, ph, h),
                                                at(ow, dr, pw, w),
                                            ) {
                                                (Some(iu), Some(it), Some(ih), Some(iw)) => {
                                                    vn[(((c * u + iu) * t + it) * h + ih) * w + iw]
                                                }
                                                _ => T::zero(),
                                            };
                                            pos += 1;
                                        }
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        let dst = out.outer_slice_mut(item);
        for (j, chunk) in dst.chunks_mut(positions).enumerate() {
            chunk.fill(p.bias.data()[j]);
        }
        T::gemm(
            cout,
            rows,
            positions,
            T::one(),
            p.weights.data(),
            false,
            &col,
            false,
            T::one(),
            dst,
        );
    }
    Ok(out)
}

/// `(N, C, U, ...)` -> `(N*U, C, ...)`.
fn to_unit_batch<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    v.permute_axes(1, 2)?.merge_axis_into_batch()
}

/// `(N*U, C, ...)` -> `(N, C, U, ...)`.
fn from_unit_batch<T: Scalar>(x: Tensor<T>, units: usize) -> Result<Tensor<T>> {
    x.split_batch_axis(units)?.permute_axes(1, 2)
}

/// Copy of a unit batch in which unit `u` of every item holds unit
/// `u + s - pad` of the source (zero when that falls in the padding).
fn shift_units<T: Scalar>(x: &Tensor<T>, units: usize, s: usize, pad: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    let items = x.shape()[0] / units;
    for n in 0..items {
        for u in 0..units {
            if let Some(src) = source_unit(u, s, pad, units) {
                out.outer_slice_mut(n * units + u)
                    .copy_from_slice(x.outer_slice(n * units + src));
            }
        }
    }
    out
}

/// Unit-axis decomposition: `b + sum_s conv3d(shift_U(v, s), W[:, :, s])`.
///
/// Issues exactly `S` calls to [`conv3d_forward`], each over all `N*U` units.
pub fn conv4d_forward_decomposed<T: Scalar>(
    v: &Tensor<T>,
    p: &Conv4dParams<T>,
) -> Result<Tensor<T>> {
    let [_, _, units, ..] = p.check_input(v)?;
    let ks = p.kernel()[0];
    let pu = p.padding[0];
    let unit_batch = to_unit_batch(v)?;
    let items = unit_batch.shape()[0] / units;

    let mut acc: Option<Tensor<T>> = None;
    for s in 0..ks {
        let per_unit = conv3d_forward(&unit_batch, &p.unit_slice(s)?)?;
        let acc = acc.get_or_insert_with(|| Tensor::zeros(per_unit.shape().to_vec()));
        for n in 0..items {
            for u in 0..units {
                let Some(src) = source_unit(u, s, pu, units) else {
                    continue;
                };
                let from = per_unit.outer_slice(n * units + src);
                for (a, &b) in acc.outer_slice_mut(n * units + u).iter_mut().zip(from) {
                    *a = *a + b;
                }
            }
        }
    }
    let mut acc = acc.expect("kernel has at least one unit slice");
    let cout = p.out_channels();
    let per_channel = acc.len() / (acc.shape()[0] * cout);
    for row in acc.data_mut().chunks_mut(per_channel).enumerate() {
        let b = p.bias.data()[row.0 % cout];
        row.1.iter_mut().for_each(|x| *x = *x + b);
    }
    from_unit_batch(acc, units)
}

/// Reverse-mode gradients of the 4D convolution (either forward route).
pub fn conv4d_backward<T: Scalar>(
    v: &Tensor<T>,
    p: &Conv4dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, _, units, t, h, w] = p.check_input(v)?;
    let cout = p.out_channels();
    grad_out.expect_shape(&[n, cout, units, t, h, w])?;
    let [ks, kp, kq, kr] = p.kernel();
    let pu = p.padding[0];

    let unit_batch = to_unit_batch(v)?;
    let grad_units = to_unit_batch(grad_out)?;
    let mut grad_input = Tensor::zeros(unit_batch.shape().to_vec());
    let mut grad_weights = Tensor::zeros(p.weights.shape().to_vec());
    let cin = p.in_channels();
    let vol = kp * kq * kr;

    for s in 0..ks {
        let shifted = shift_units(&unit_batch, units, s, pu);
        let g = conv3d_backward(&shifted, &p.unit_slice(s)?, &grad_units)?;
        // shifted unit u came from source unit u + s - pad
        for item in 0..n {
            for u in 0..units {
                let Some(src) = source_unit(u, s, pu, units) else {
                    continue;
                };
                let from = g.input.outer_slice(item * units + u);
                for (a, &b) in grad_input
                    .outer_slice_mut(item * units + src)
                    .iter_mut()
                    .zip(from)
                {
                    *a = *a + b;
                }
            }
        }
        let dw = grad_weights.data_mut();
        for j in 0..cout {
            for c in 0..cin {
                let dst = ((j * cin + c) * ks + s) * vol;
                let src = (j * cin + c) * vol;
                dw[dst..dst + vol].copy_from_slice(&g.weights.data()[src..src + vol]);
            }
        }
    }

    let mut grad_bias = vec![T::zero(); cout];
    let per_channel = units * t * h * w;
    for (k, chunk) in grad_out.data().chunks(per_channel).enumerate() {
        grad_bias[k % cout] = grad_bias[k % cout] + chunk.iter().fold(T::zero(), |acc, &x| acc + x);
    }
    Ok(ConvGrads {
        input: from_unit_batch(grad_input, units)?,
        weights: grad_weights,
        bias: Tensor::new(vec![cout], grad_bias)?,
    })
}

/// Multiply-accumulates of one 4D convolution over `batch` items of
/// extents `(U, T, H, W)`, counting every kernel tap.
pub fn conv4d_macs(
    cin: usize,
    cout: usize,
    kernel: [usize; 4],
    dims: [usize; 4],
    batch: usize,
) -> u64 {
    (cout * cin) as u64
        * kernel.iter().product::<usize>() as u64
        * dims.iter().product::<usize>() as u64
        * batch as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn pointwise_identity_both_routes() {
        let v = lcg_tensor(vec![1, 1, 3, 2, 3, 3], 1);
        let p = Conv4dParams::same(Tensor::ones(vec![1, 1, 1, 1, 1, 1]), Tensor::zeros(vec![1]))
            .unwrap();
        assert_eq!(conv4d_forward_direct(&v, &p).unwrap(), v);
        assert_eq!(conv4d_forward_decomposed(&v, &p).unwrap(), v);
    }

    #[test]
    fn unit_averaging_boundary_effect() {
        let v = Tensor::<f64>::ones(vec![1, 1, 4, 2, 2, 2]);
        let p = Conv4dParams::same(
            Tensor::full(vec![1, 1, 3, 1, 1, 1], 1.0 / 3.0),
            Tensor::zeros(vec![1]),
        )
        .unwrap();
        for out in [
            conv4d_forward_direct(&v, &p).unwrap(),
            conv4d_forward_decomposed(&v, &p).unwrap(),
        ] {
            for u in 0..4 {
                let expected = if u == 0 || u == 3 { 2.0 / 3.0 } else { 1.0 };
                assert!((out.get(&[0, 0, u, 1, 1, 0]).unwrap() - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn routes_agree_on_each_form() {
        for (seed, kernel) in [[3, 1, 1, 1], [3, 3, 1, 1], [3, 3, 3, 3]]
            .into_iter()
            .enumerate()
        {
            let v = lcg_tensor(vec![2, 2, 3, 3, 4, 4], seed as u64);
            let mut wshape = vec![2, 2];
            wshape.extend_from_slice(&kernel);
            let p = Conv4dParams::same(
                lcg_tensor(wshape, 10 + seed as u64),
                lcg_tensor(vec![2], 20),
            )
            .unwrap();
            let a = conv4d_forward_direct(&v, &p).unwrap();
            let b = conv4d_forward_decomposed(&v, &p).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn single_slice_is_per_unit_conv3d() {
        let v = lcg_tensor(vec![1, 2, 3, 3, 4, 4], 5);
        let p = Conv4dParams::same(
            lcg_tensor(vec![2, 2, 1, 3, 3, 3], 6),
            lcg_tensor(vec![2], 7),
        )
        .unwrap();
        let out = conv4d_forward_decomposed(&v, &p).unwrap();
        let mut c3 = p.unit_slice(0).unwrap();
        c3.bias = p.bias.clone();
        for u in 0..3 {
            let unit = v
                .narrow(2, u, 1)
                .unwrap()
                .permute_axes(1, 2)
                .unwrap()
                .merge_axis_into_batch()
                .unwrap();
            let expect = conv3d_forward(&unit, &c3).unwrap();
            let got = out
                .narrow(2, u, 1)
                .unwrap()
                .permute_axes(1, 2)
                .unwrap()
                .merge_axis_into_batch()
                .unwrap();
            assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn forms_are_classified() {
        assert_eq!(
            Conv4dParams::<f32>::zeros(1, 1, [3, 1, 1, 1])
                .unwrap()
                .form(),
            KernelForm::UnitOnly
        );
        assert_eq!(
            Conv4dParams::<f32>::zeros(1, 1, [3, 3, 1, 1])
                .unwrap()
                .form(),
            KernelForm::UnitTime
        );
        assert_eq!(
            Conv4dParams::<f32>::zeros(1, 1, [3, 3, 3, 3])
                .unwrap()
                .form(),
            KernelForm::Full
        );
        assert!(Conv4dParams::<f32>::zeros(1, 1, [2, 1, 1, 1]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let v = lcg_tensor(vec![1, 2, 3, 2, 3, 3], 3);
        let p = Conv4dParams::same(
            lcg_tensor(vec![2, 2, 3, 3, 1, 1], 4),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let g = conv4d_backward(&v, &p, &Tensor::zeros(vec![1, 2, 3, 2, 3, 3])).unwrap();
        assert_eq!(
            g.input.max_abs() + g.weights.max_abs() + g.bias.max_abs(),
            0.0
        );
    }
}
