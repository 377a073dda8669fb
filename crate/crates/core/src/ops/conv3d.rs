//! 3D convolution over `(N, C, T, H, W)` via im2col and a dense matrix product.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dParams<T> {
    /// `(C_out, C_in, P, Q, R)`
    pub weights: Tensor<T>,
    /// `(C_out)`
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3dParams<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Tensor<T>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if weights.rank() != 5 {
            return Err(Error::shape(format!(
                "conv3d weights must be rank 5, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(format!(
                "conv3d bias {:?} does not match {} output channels",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d stride must be positive"));
        }
        Ok(Conv3dParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Stride 1 with `(k - 1) / 2` padding on every axis.
    pub fn same(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let k = &weights
            .shape()
            .get(2..5)
            .map(|s| s.to_vec())
            .unwrap_or_default();
        if k.len() != 3 || k.iter().any(|&e| e % 2 == 0) {
            return Err(Error::invalid(format!(
                "same padding needs odd kernel extents, got {k:?}"
            )));
        }
        let padding = [(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2];
        Self::new(weights, bias, [1, 1, 1], padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weights.shape();
        [s[2], s[3], s[4]]
    }

    /// Output `(T', H', W')` for an input of extents `dims`.
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        conv_output_dims(dims, self.kernel(), self.stride, self.padding)
    }
}

pub(crate) fn conv_output_dims(
    dims: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = dims[a] + 2 * padding[a];
        if kernel[a] > padded {
            return Err(Error::shape(format!(
                "kernel {kernel:?} larger than padded input {dims:?} (+2*{padding:?})"
            )));
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

/// Geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Self> {
        if x.rank() != 5 {
            return Err(Error::shape(format!(
                "conv3d input must be (N,C,T,H,W), got {:?}",
                x.shape()
            )));
        }
        let s = x.shape();
        if s[1] != p.in_channels() {
            return Err(Error::shape(format!(
                "conv3d input has {} channels, weights expect {}",
                s[1],
                p.in_channels()
            )));
        }
        let input = [s[2], s[3], s[4]];
        Ok(Geometry {
            cin: s[1],
            cout: p.out_channels(),
            input,
            kernel: p.kernel(),
            stride: p.stride,
            padding: p.padding,
            output: p.output_dims(input)?,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Input coordinate touched by output `o` and tap `k` on axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[a] + k) as isize - self.padding[a] as isize;
        (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kp, kq, kr] = g.kernel;
    let [ot, oh, ow] = g.output;
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for p in 0..kp {
            for q in 0..kq {
                for r in 0..kr {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for t in 0..ot {
                        let Some(st) = g.source(0, t, p) else {
                            dst[t * oh * ow..(t + 1) * oh * ow].fill(T::zero());
                            continue;
                        };
                        for h in 0..oh {
                            let base = (t * oh + h) * ow;
                            let Some(sh) = g.source(1, h, q) else {
                                dst[base..base + ow].fill(T::zero());
                                continue;
                            };
                            let src = &xc[(st * ih + sh) * iw..(st * ih + sh + 1) * iw];
                            for w in 0..ow {
                                dst[base + w] = match g.source(2, w, r) {
                                    Some(sw) => src[sw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kp, kq, kr] = g.kernel;
    let [ot, oh, ow] = g.output;
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for p in 0..kp {
            for q in 0..kq {
                for r in 0..kr {
                    let src = &col[row * cols..(row + 1) * cols];
                    for t in 0..ot {
                        let Some(st) = g.source(0, t, p) else {
                            continue;
                        };
                        for h in 0..oh {
                            let Some(sh) = g.source(1, h, q) else {
                                continue;
                            };
                            let base = (t * oh + h) * ow;
                            let dst = &mut dxc[(st * ih + sh) * iw..(st * ih + sh + 1) * iw];
                            for w in 0..ow {
                                if let Some(sw) = g.source(2, w, r) {
                                    dst[sw] = dst[sw] + src[base + w];
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

/// `o[n,j,t,h,w] = b[j] + sum_{c,p,q,r} W[j,c,p,q,r] * x_pad[n,c,t*st+p,h*sh+q,w*sw+r]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, p: &Conv3dParams<T>) -> Result<Tensor<T>> {
    let g = Geometry::new(x, p)?;
    let n = x.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(vec![n, g.cout, g.output[0], g.output[1], g.output[2]]);
    let weights = p.weights.data();
    let bias = p.bias.data();
    let in_len = g.cin * g.in_volume();

    out.data_mut()
        .par_chunks_mut(g.cout * cols)
        .enumerate()
        .for_each(|(item, dst)| {
            let xn = &x.data()[item * in_len..(item + 1) * in_len];
            for (j, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bias[j]);
            }
            if g.is_pointwise() {
                T::gemm(
                    g.cout,
                    rows,
                    cols,
                    T::one(),
                    weights,
                    false,
                    xn,
                    false,
                    T::one(),
                    dst,
                );
            } else {
                let mut col = vec![T::zero(); rows * cols];
                im2col(xn, &g, &mut col);
                T::gemm(
                    g.cout,
                    rows,
                    cols,
                    T::one(),
                    weights,
                    false,
                    &col,
                    false,
                    T::one(),
                    dst,
                );
            }
        });
    Ok(out)
}

/// Reverse-mode gradients of [`conv3d_forward`].
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv3dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x, p)?;
    let n = x.shape()[0];
    grad_out.expect_shape(&[n, g.cout, g.output[0], g.output[1], g.output[2]])?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.in_volume();
    let weights = p.weights.data();

    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|item| {
            let xn = &x.data()[item * in_len..(item + 1) * in_len];
            let gn = grad_out.outer_slice(item);
            let mut dw = vec![T::zero(); g.cout * rows];
            let mut dx = vec![T::zero(); in_len];
            if g.is_pointwise() {
                T::gemm(
                    g.cout,
                    cols,
                    rows,
                    T::one(),
                    gn,
                    false,
                    xn,
                    true,
                    T::zero(),
                    &mut dw,
                );
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    T::one(),
                    weights,
                    true,
                    gn,
                    false,
                    T::zero(),
                    &mut dx,
                );
            } else {
                let mut col = vec![T::zero(); rows * cols];
                im2col(xn, &g, &mut col);
                T::gemm(
                    g.cout,
                    cols,
                    rows,
                    T::one(),
                    gn,
                    false,
                    &col,
                    true,
                    T::zero(),
                    &mut dw,
                );
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    T::one(),
                    weights,
                    true,
                    gn,
                    false,
                    T::zero(),
                    &mut col,
                );
                col2im(&col, &g, &mut dx);
            }
            (dx, dw)
        })
        .collect();

    let mut dx_all = Vec::with_capacity(n * in_len);
    let mut dw_total = vec![T::zero(); g.cout * rows];
    for (dx, dw) in per_item {
        dx_all.extend_from_slice(&dx);
        for (a, b) in dw_total.iter_mut().zip(dw) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for item in 0..n {
        for (j, chunk) in grad_out.outer_slice(item).chunks(cols).enumerate() {
            db[j] = db[j] + chunk.iter().fold(T::zero(), |acc, &v| acc + v);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx_all)?,
        weights: Tensor::new(p.weights.shape().to_vec(), dw_total)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Multiply-accumulate count of one forward pass over `batch` items.
pub fn conv3d_macs(
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    output: [usize; 3],
    batch: usize,
) -> u64 {
    (cout * cin) as u64
        * kernel.iter().product::<usize>() as u64
        * output.iter().product::<usize>() as u64
        * batch as u64
}
