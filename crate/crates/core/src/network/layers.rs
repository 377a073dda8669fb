//! Trainable layers. Each keeps its parameters, accumulated gradients and
//! the activations cached by the last training-path forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, conv3d_backward, conv3d_forward,
    conv3d_macs, conv4d_backward, conv4d_forward_decomposed, conv4d_macs, fully_connected,
    fully_connected_backward, global_avg_pool, global_avg_pool_backward, maxpool3d,
    maxpool3d_backward, relu, BatchNormParams, BnCache, Conv3dParams, Conv4dParams, Mode,
    PoolWindow,
};
use crate::tensor::{Scalar, Tensor};

/// What an optimizer may do with a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Only convolution and classifier weights are decayed.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Mutable view of one parameter and its gradient.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
    pub kind: ParamKind,
    /// Set for parameters that live inside a residual 4D block.
    pub in_4d_block: bool,
}

/// ReLU backward with derivative 1/2 at exactly zero, the symmetric
/// subgradient that central differences measure at the kink. A residual 4D
/// block whose weights are all zero sits exactly on the kink.
fn relu_grad<T: Scalar>(pre: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    pre.zip_map(grad, |x, g| {
        if x > T::zero() {
            g
        } else if x == T::zero() {
            g * half
        } else {
            T::zero()
        }
    })
}

fn missing_cache(layer: &str) -> Error {
    Error::Model(format!(
        "{layer}: backward called without a cached training forward pass"
    ))
}

fn he_normal<T: Scalar, R: Rng>(shape: Vec<usize>, fan: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

fn bn_with_stats<T: Scalar>(channels: usize) -> BatchNormParams<T> {
    let mut bn = BatchNormParams::new(channels);
    bn.reset_running_stats();
    bn
}

/// 3D convolution followed by batch normalization. The convolution has no
/// trainable bias since the normalization absorbs it.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv3dParams<T>,
    pub bn: BatchNormParams<T>,
    grad_weights: Tensor<T>,
    grad_gamma: Tensor<T>,
    grad_beta: Tensor<T>,
    cache: Option<(Tensor<T>, BnCache<T>)>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let shape = vec![cout, cin, kernel[0], kernel[1], kernel[2]];
        let fan_out = cout * kernel.iter().product::<usize>();
        let weights = he_normal(shape.clone(), fan_out, rng);
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let conv = Conv3dParams::new(weights, Tensor::zeros(vec![cout]), stride, padding)?;
        Ok(ConvBn {
            conv,
            bn: bn_with_stats(cout),
            grad_weights: Tensor::zeros(shape),
            grad_gamma: Tensor::zeros(vec![cout]),
            grad_beta: Tensor::zeros(vec![cout]),
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv3d_forward(x, &self.conv)?;
        let (out, bn_cache) = batchnorm_forward(&y, &mut self.bn, mode)?;
        self.cache = Some((x.clone(), bn_cache));
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv3d_forward(x, &self.conv)?;
        Ok(batchnorm_eval(&y, &self.bn)?.0)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, bn_cache) = self.cache.as_ref().ok_or_else(|| missing_cache("conv"))?;
        let g_bn = batchnorm_backward(bn_cache, &self.bn, grad)?;
        let g = conv3d_backward(x, &self.conv, &g_bn.input)?;
        self.grad_weights.add_assign(&g.weights)?;
        self.grad_gamma.add_assign(&g_bn.gamma)?;
        self.grad_beta.add_assign(&g_bn.beta)?;
        Ok(g.input)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        self.conv.output_dims(dims)
    }

    pub fn macs(&self, dims: [usize; 3], batch: usize) -> Result<u64> {
        let out = self.output_dims(dims)?;
        Ok(conv3d_macs(
            self.conv.in_channels(),
            self.conv.out_channels(),
            self.conv.kernel(),
            out,
            batch,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.conv.weights.len() + 2 * self.bn.channels()
    }

    pub fn params_mut(&mut self, prefix: &str, in_4d_block: bool) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                name: format!("{prefix}.conv.weight"),
                value: &mut self.conv.weights,
                grad: &mut self.grad_weights,
                kind: ParamKind::Weight,
                in_4d_block,
            },
            ParamSlot {
                name: format!("{prefix}.bn.gamma"),
                value: &mut self.bn.gamma,
                grad: &mut self.grad_gamma,
                kind: ParamKind::BnScale,
                in_4d_block,
            },
            ParamSlot {
                name: format!("{prefix}.bn.beta"),
                value: &mut self.bn.beta,
                grad: &mut self.grad_beta,
                kind: ParamKind::BnShift,
                in_4d_block,
            },
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Running-statistics buffers of a batch norm, by name.
pub(crate) fn bn_buffers<'a, T: Scalar>(
    prefix: &str,
    bn: &'a mut BatchNormParams<T>,
) -> Vec<(String, &'a mut Option<Tensor<T>>)> {
    vec![
        (format!("{prefix}.bn.running_mean"), &mut bn.running_mean),
        (format!("{prefix}.bn.running_var"), &mut bn.running_var),
    ]
}

/// Convolution + batch norm + ReLU; the network stem.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub unit: ConvBn<T>,
    pre_relu: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(unit: ConvBn<T>) -> Self {
        ConvLayer {
            unit,
            pre_relu: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pre = self.unit.forward(x, mode)?;
        let out = relu(&pre);
        self.pre_relu = Some(pre);
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.unit.infer(x)?))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let pre = self
            .pre_relu
            .as_ref()
            .ok_or_else(|| missing_cache("stem"))?;
        let g = relu_grad(pre, grad)?;
        self.unit.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.pre_relu = None;
        self.unit.clear_cache();
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolLayer {
    pub window: PoolWindow,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPoolLayer {
    pub fn new(window: PoolWindow) -> Self {
        MaxPoolLayer {
            window,
            cache: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = maxpool3d(x, self.window)?;
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(y)
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(maxpool3d(x, self.window)?.0)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| missing_cache("pool"))?;
        maxpool3d_backward(shape, argmax, grad)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Layout of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 1x3x3 convolutions.
    Basic2d,
    /// Two 3x3x3 convolutions.
    Basic3d,
    /// 1x1x1, 1x3x3, 1x1x1.
    Bottleneck2d,
    /// 3x1x1, 1x3x3, 1x1x1.
    Bottleneck3d,
    /// One 3x3x3 convolution.
    Single3d,
}

impl BlockKind {
    pub fn kernels(self) -> &'static [[usize; 3]] {
        match self {
            BlockKind::Basic2d => &[[1, 3, 3], [1, 3, 3]],
            BlockKind::Basic3d => &[[3, 3, 3], [3, 3, 3]],
            BlockKind::Bottleneck2d => &[[1, 1, 1], [1, 3, 3], [1, 1, 1]],
            BlockKind::Bottleneck3d => &[[3, 1, 1], [1, 3, 3], [1, 1, 1]],
            BlockKind::Single3d => &[[3, 3, 3]],
        }
    }
}

/// Standard residual block: conv-BN(-ReLU) chain plus identity or projection
/// shortcut, ReLU after the addition.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub kind: BlockKind,
    pub convs: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
    pre_relus: Vec<Tensor<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    /// Spatial stride, if any, sits in the first convolution and the shortcut.
    pub fn new<R: Rng>(
        kind: BlockKind,
        cin: usize,
        mid: usize,
        cout: usize,
        spatial_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kernels = kind.kernels();
        let stride = [1, spatial_stride, spatial_stride];
        let mut convs = Vec::with_capacity(kernels.len());
        for (i, &k) in kernels.iter().enumerate() {
            let c_in = if i == 0 { cin } else { mid };
            let c_out = if i + 1 == kernels.len() { cout } else { mid };
            convs.push(ConvBn::new(
                c_in,
                c_out,
                k,
                if i == 0 { stride } else { [1, 1, 1] },
                rng,
            )?);
        }
        let shortcut = if cin != cout || spatial_stride != 1 {
            Some(ConvBn::new(cin, cout, [1, 1, 1], stride, rng)?)
        } else {
            None
        };
        Ok(ResidualBlock {
            kind,
            convs,
            shortcut,
            pre_relus: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.pre_relus.clear();
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, unit) in self.convs.iter_mut().enumerate() {
            h = unit.forward(&h, mode)?;
            if i < last {
                let out = relu(&h);
                self.pre_relus.push(std::mem::replace(&mut h, out));
            }
        }
        let skip = match self.shortcut.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        let sum = h.add(&skip)?;
        let out = relu(&sum);
        self.pre_relus.push(sum);
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, unit) in self.convs.iter().enumerate() {
            h = unit.infer(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        let skip = match self.shortcut.as_ref() {
            Some(s) => s.infer(x)?,
            None => x.clone(),
        };
        Ok(relu(&h.add(&skip)?))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if self.pre_relus.len() != self.convs.len() {
            return Err(missing_cache("residual block"));
        }
        let mut g = relu_grad(&self.pre_relus[self.convs.len() - 1], grad)?;
        let g_skip = match self.shortcut.as_mut() {
            Some(s) => s.backward(&g)?,
            None => g.clone(),
        };
        for i in (0..self.convs.len()).rev() {
            g = self.convs[i].backward(&g)?;
            if i > 0 {
                g = relu_grad(&self.pre_relus[i - 1], &g)?;
            }
        }
        g.add(&g_skip)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut d = dims;
        for unit in &self.convs {
            d = unit.output_dims(d)?;
        }
        Ok(d)
    }

    pub fn out_channels(&self) -> usize {
        self.convs
            .last()
            .map(|c| c.conv.out_channels())
            .unwrap_or(0)
    }

    pub fn macs(&self, dims: [usize; 3], batch: usize) -> Result<u64> {
        let mut d = dims;
        let mut total = 0;
        for unit in &self.convs {
            total += unit.macs(d, batch)?;
            d = unit.output_dims(d)?;
        }
        if let Some(s) = &self.shortcut {
            total += s.macs(dims, batch)?;
        }
        Ok(total)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvBn::param_count).sum::<usize>()
            + self.shortcut.as_ref().map_or(0, ConvBn::param_count)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        for (i, unit) in self.convs.iter_mut().enumerate() {
            out.extend(unit.params_mut(&format!("{prefix}.{i}"), false));
        }
        if let Some(s) = self.shortcut.as_mut() {
            out.extend(s.params_mut(&format!("{prefix}.shortcut"), false));
        }
        out
    }

    pub(crate) fn buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Option<Tensor<T>>)> {
        let mut out = Vec::new();
        for (i, unit) in self.convs.iter_mut().enumerate() {
            out.extend(bn_buffers(&format!("{prefix}.{i}"), &mut unit.bn));
        }
        if let Some(s) = self.shortcut.as_mut() {
            out.extend(bn_buffers(&format!("{prefix}.shortcut"), &mut s.bn));
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.pre_relus.clear();
        self.convs.iter_mut().for_each(ConvBn::clear_cache);
        if let Some(s) = self.shortcut.as_mut() {
            s.clear_cache();
        }
    }
}

#[derive(Clone, Debug)]
struct Block4dCache<T> {
    volume: Tensor<T>,
    bn: BnCache<T>,
    pre_relu: Tensor<T>,
}

/// Residual 4D block on unit-batched activations `(N*U, C, T, H, W)`:
///
/// `y = x + phi_UC(ReLU(BN(conv4d(phi_CU(x)))))`
///
/// where `phi_CU` regroups the batch into `(N, C, U, T, H, W)` and `phi_UC`
/// undoes it. Batch norm sees the regrouped-back form, so units act as batch.
#[derive(Clone, Debug)]
pub struct Residual4dBlock<T> {
    pub conv: Conv4dParams<T>,
    pub bn: BatchNormParams<T>,
    pub units: usize,
    grad_weights: Tensor<T>,
    grad_bias: Tensor<T>,
    grad_gamma: Tensor<T>,
    grad_beta: Tensor<T>,
    cache: Option<Block4dCache<T>>,
}

impl<T: Scalar> Residual4dBlock<T> {
    pub fn new(conv: Conv4dParams<T>, units: usize) -> Result<Self> {
        if conv.in_channels() != conv.out_channels() {
            return Err(Error::shape(format!(
                "residual 4D block needs C_in == C_out, got {} -> {}",
                conv.in_channels(),
                conv.out_channels()
            )));
        }
        if units == 0 {
            return Err(Error::invalid("residual 4D block needs at least one unit"));
        }
        let c = conv.out_channels();
        Ok(Residual4dBlock {
            grad_weights: Tensor::zeros(conv.weights.shape().to_vec()),
            grad_bias: Tensor::zeros(vec![c]),
            grad_gamma: Tensor::zeros(vec![c]),
            grad_beta: Tensor::zeros(vec![c]),
            bn: bn_with_stats(c),
            conv,
            units,
            cache: None,
        })
    }

    /// Zero-initialized block: the identity map until trained.
    pub fn zeros(channels: usize, kernel: [usize; 4], units: usize) -> Result<Self> {
        Self::new(Conv4dParams::zeros(channels, channels, kernel)?, units)
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }

    fn to_volume(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 5 || x.shape()[1] != self.channels() {
            return Err(Error::shape(format!(
                "residual 4D block over {} channels got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        x.clone().split_batch_axis(self.units)?.permute_axes(1, 2)
    }

    fn from_volume(&self, v: Tensor<T>) -> Result<Tensor<T>> {
        v.permute_axes(1, 2)?.merge_axis_into_batch()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let volume = self.to_volume(x)?;
        let mixed = self.from_volume(conv4d_forward_decomposed(&volume, &self.conv)?)?;
        let (normed, bn) = batchnorm_forward(&mixed, &mut self.bn, mode)?;
        let out = x.add(&relu(&normed))?;
        self.cache = Some(Block4dCache {
            volume,
            bn,
            pre_relu: normed,
        });
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let volume = self.to_volume(x)?;
        let mixed = self.from_volume(conv4d_forward_decomposed(&volume, &self.conv)?)?;
        let (normed, _) = batchnorm_eval(&mixed, &self.bn)?;
        x.add(&relu(&normed))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("residual 4D block"))?;
        let g_relu = relu_grad(&cache.pre_relu, grad)?;
        let g_bn = batchnorm_backward(&cache.bn, &self.bn, &g_relu)?;
        let g_volume = g_bn
            .input
            .split_batch_axis(self.units)?
            .permute_axes(1, 2)?;
        let g = conv4d_backward(&cache.volume, &self.conv, &g_volume)?;
        self.grad_weights.add_assign(&g.weights)?;
        self.grad_bias.add_assign(&g.bias)?;
        self.grad_gamma.add_assign(&g_bn.gamma)?;
        self.grad_beta.add_assign(&g_bn.beta)?;
        grad.add(&self.from_volume(g.input)?)
    }

    /// `dims` are per-unit `(T, H, W)`; `batch` counts videos.
    pub fn macs(&self, dims: [usize; 3], batch: usize) -> u64 {
        let c = self.channels();
        conv4d_macs(
            c,
            c,
            self.conv.kernel(),
            [self.units, dims[0], dims[1], dims[2]],
            batch,
        )
    }

    pub fn param_count(&self) -> usize {
        self.conv.weights.len() + self.conv.bias.len() + 2 * self.bn.channels()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                name: format!("{prefix}.conv4d.weight"),
                value: &mut self.conv.weights,
                grad: &mut self.grad_weights,
                kind: ParamKind::Weight,
                in_4d_block: true,
            },
            ParamSlot {
                name: format!("{prefix}.conv4d.bias"),
                value: &mut self.conv.bias,
                grad: &mut self.grad_bias,
                kind: ParamKind::Bias,
                in_4d_block: true,
            },
            ParamSlot {
                name: format!("{prefix}.bn.gamma"),
                value: &mut self.bn.gamma,
                grad: &mut self.grad_gamma,
                kind: ParamKind::BnScale,
                in_4d_block: true,
            },
            ParamSlot {
                name: format!("{prefix}.bn.beta"),
                value: &mut self.bn.beta,
                grad: &mut self.grad_beta,
                kind: ParamKind::BnShift,
                in_4d_block: true,
            },
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Global average pool over units, frames and pixels, then a linear classifier.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    grad_weights: Tensor<T>,
    grad_bias: Tensor<T>,
    cache: Option<(Vec<usize>, usize, Tensor<T>)>,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        Head {
            weights: Tensor::from_fn(vec![classes, channels], |_| T::from_f64(normal.sample(rng))),
            bias: Tensor::zeros(vec![classes]),
            grad_weights: Tensor::zeros(vec![classes, channels]),
            grad_bias: Tensor::zeros(vec![classes]),
            cache: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `(N*U, C, T, H, W) -> (N, C)`: mean over units and positions.
    pub fn pool(x: &Tensor<T>, units: usize) -> Result<Tensor<T>> {
        let per_unit = global_avg_pool(x)?;
        let c = per_unit.shape()[1];
        let grouped = per_unit.split_batch_axis(units)?;
        let n = grouped.shape()[0];
        // (N, U, C) -> (N, C, U) -> mean over U
        global_avg_pool(
            &grouped
                .reshape(vec![n, units, c])?
                .permute_axes(1, 2)?
                .reshape(vec![n, c, units, 1])?,
        )
    }

    pub fn forward(&mut self, x: &Tensor<T>, units: usize) -> Result<Tensor<T>> {
        let pooled = Self::pool(x, units)?;
        let logits = fully_connected(&pooled, &self.weights, &self.bias)?;
        self.cache = Some((x.shape().to_vec(), units, pooled));
        Ok(logits)
    }

    pub fn infer(&self, x: &Tensor<T>, units: usize) -> Result<Tensor<T>> {
        fully_connected(&Self::pool(x, units)?, &self.weights, &self.bias)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, units, pooled) = self.cache.as_ref().ok_or_else(|| missing_cache("head"))?;
        let g = fully_connected_backward(pooled, &self.weights, &self.bias, grad)?;
        self.grad_weights.add_assign(&g.weights)?;
        self.grad_bias.add_assign(&g.bias)?;
        let (n, c) = (pooled.shape()[0], pooled.shape()[1]);
        let g_units = global_avg_pool_backward(&[n, c, *units, 1], &g.input)?
            .reshape(vec![n, c, *units])?
            .permute_axes(1, 2)?
            .reshape(vec![n * units, c])?;
        global_avg_pool_backward(shape, &g_units)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (self.weights.len() * batch) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                name: format!("{prefix}.fc.weight"),
                value: &mut self.weights,
                grad: &mut self.grad_weights,
                kind: ParamKind::Weight,
                in_4d_block: false,
            },
            ParamSlot {
                name: format!("{prefix}.fc.bias"),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
                kind: ParamKind::Bias,
                in_4d_block: false,
            },
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
