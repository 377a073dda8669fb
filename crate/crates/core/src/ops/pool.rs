use crate::error::{Error, Result};
use crate::ops::conv3d::conv_output_dims;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolWindow {
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        conv_output_dims(dims, self.kernel, self.stride, self.padding)
    }
}

/// Max pooling over `(T, H, W)` of an `(N, C, T, H, W)` tensor. Padded
/// positions never win. Returns the output and the flat input offset of
/// each maximum.
pub fn maxpool3d<T: Scalar>(x: &Tensor<T>, win: PoolWindow) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 5 {
        return Err(Error::shape(format!(
            "maxpool3d expects (N,C,T,H,W), got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    let (planes, dims) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let out_dims = win.output_dims(dims)?;
    let plane_in = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(planes * out_dims.iter().product::<usize>());
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..planes {
        let base = plane * plane_in;
        for ot in 0..out_dims[0] {
            for oh in 0..out_dims[1] {
                for ow in 0..out_dims[2] {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    let o = [ot, oh, ow];
                    for kt in 0..win.kernel[0] {
                        for kh in 0..win.kernel[1] {
                            for kw in 0..win.kernel[2] {
                                let k = [kt, kh, kw];
                                let mut idx = [0usize; 3];
                                let mut inside = true;
                                for a in 0..3 {
                                    let i = (o[a] * win.stride[a] + k[a]) as isize
                                        - win.padding[a] as isize;
                                    if i < 0 || i as usize >= dims[a] {
                                        inside = false;
                                        break;
                                    }
                                    idx[a] = i as usize;
                                }
                                if !inside {
                                    continue;
                                }
                                let off = base + (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
                                if x.data()[off] > best || best_at == usize::MAX {
                                    best = x.data()[off];
                                    best_at = off;
                                }
                            }
                        }
                    }
                    if best_at == usize::MAX {
                        return Err(Error::shape("pooling window lies entirely in padding"));
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![s[0], s[1], out_dims[0], out_dims[1], out_dims[2]], out)?,
        argmax,
    ))
}

pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool gradient does not match cached argmax",
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[at] = dx.data()[at] + g;
    }
    Ok(dx)
}

/// Average over every axis after the channel axis: `(N, C, ...) -> (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape(format!(
            "global pool expects (N,C,...), got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner = x.len() / (n * c);
    let scale = T::one() / T::from_usize(inner);
    let data = x
        .data()
        .chunks(inner)
        .map(|s| s.iter().fold(T::zero(), |a, &v| a + v) * scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = (input_shape[0], input_shape[1]);
    grad_out.expect_shape(&[n, c])?;
    let inner: usize = input_shape[2..].iter().product();
    let scale = T::one() / T::from_usize(inner);
    let mut data = Vec::with_capacity(n * c * inner);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, inner));
    }
    Tensor::new(input_shape.to_vec(), data)
}
