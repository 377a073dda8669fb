//! Backbone assembly: stem, residual stages with optional residual 4D blocks,
//! pooled linear head. Activations travel unit-batched as `(N*U, C, T, H, W)`.

mod layers;
mod spec;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use layers::{
    BlockKind, ConvBn, ConvLayer, Head, MaxPoolLayer, ParamKind, ParamSlot, Residual4dBlock,
    ResidualBlock,
};
pub use spec::{Insertion, NetworkSpec, PRESETS};

use crate::error::{Error, Result};
use crate::ops::{Mode, PoolWindow};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    MaxPool(MaxPoolLayer),
    Block(ResidualBlock<T>),
    Block4d(Residual4dBlock<T>),
    Head(Head<T>),
}

impl<T: Scalar> Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, units: usize, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Block(l) => l.forward(x, mode),
            Layer::Block4d(l) => l.forward(x, mode),
            Layer::Head(l) => l.forward(x, units),
        }
    }

    fn infer(&self, x: &Tensor<T>, units: usize) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::Block(l) => l.infer(x),
            Layer::Block4d(l) => l.infer(x),
            Layer::Head(l) => l.infer(x, units),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::MaxPool(l) => l.backward(g),
            Layer::Block(l) => l.backward(g),
            Layer::Block4d(l) => l.backward(g),
            Layer::Head(l) => l.backward(g),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::MaxPool(l) => l.clear_cache(),
            Layer::Block(l) => l.clear_cache(),
            Layer::Block4d(l) => l.clear_cache(),
            Layer::Head(l) => l.clear_cache(),
        }
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamSlot<'_, T>> {
        match self {
            Layer::Conv(l) => l.unit.params_mut(prefix, false),
            Layer::MaxPool(_) => Vec::new(),
            Layer::Block(l) => l.params_mut(prefix),
            Layer::Block4d(l) => l.params_mut(prefix),
            Layer::Head(l) => l.params_mut(prefix),
        }
    }

    fn buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Option<Tensor<T>>)> {
        match self {
            Layer::Conv(l) => layers::bn_buffers(prefix, &mut l.unit.bn),
            Layer::Block(l) => l.buffers_mut(prefix),
            Layer::Block4d(l) => layers::bn_buffers(prefix, &mut l.bn),
            Layer::MaxPool(_) | Layer::Head(_) => Vec::new(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Block(_) => "block",
            Layer::Block4d(_) => "block4d",
            Layer::Head(_) => "head",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedLayer<T> {
    pub name: String,
    pub layer: Layer<T>,
}

/// Static per-layer accounting for one input geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerTrace {
    pub name: String,
    pub kind: &'static str,
    /// `[N*U, C, T, H, W]`, or `[N, classes]` for the head.
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<NamedLayer<T>>,
    last_input: Option<(usize, usize, Vec<usize>)>,
}

/// `(N, C, U, T, H, W) -> (N*U, C, T, H, W)`.
pub fn to_unit_batch<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 6 {
        return Err(Error::shape(format!(
            "expected (N, C, U, T, H, W) input, got {:?}",
            v.shape()
        )));
    }
    v.permute_axes(1, 2)?.merge_axis_into_batch()
}

/// `(N*U, C, T, H, W) -> (N, C, U, T, H, W)`.
pub fn from_unit_batch<T: Scalar>(x: Tensor<T>, units: usize) -> Result<Tensor<T>> {
    x.split_batch_axis(units)?.permute_axes(1, 2)
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        let mut push = |name: String, layer: Layer<T>| layers.push(NamedLayer { name, layer });

        let w = spec.width;
        push(
            "conv1".into(),
            Layer::Conv(ConvLayer::new(ConvBn::new(
                spec.in_channels,
                w,
                [1, 7, 7],
                [1, 2, 2],
                &mut rng,
            )?)),
        );
        push(
            "pool1".into(),
            Layer::MaxPool(MaxPoolLayer::new(PoolWindow {
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                padding: [0, 1, 1],
            })),
        );

        let mut cin = w;
        for (si, &count) in spec.stage_blocks().iter().enumerate() {
            let stage = si + 2;
            let (mid, cout) = spec.stage_channels(si);
            for b in 0..count {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                let block =
                    ResidualBlock::new(spec.block_kind(si), cin, mid, cout, stride, &mut rng)?;
                push(format!("res{stage}.{b}"), Layer::Block(block));
                cin = cout;
                if b + 1 == count && stage == 4 && spec.extra_res4_block {
                    let extra =
                        ResidualBlock::new(BlockKind::Single3d, cout, cout, cout, 1, &mut rng)?;
                    push(format!("res{stage}.{count}"), Layer::Block(extra));
                }
                for ins in spec
                    .insertions
                    .iter()
                    .filter(|i| i.stage == stage && i.after_block == b)
                {
                    let blk = Residual4dBlock::zeros(cout, ins.kernel, spec.units)?;
                    push(format!("res{stage}.fd{b}"), Layer::Block4d(blk));
                }
            }
        }
        push(
            "head".into(),
            Layer::Head(Head::new(cin, spec.num_classes, &mut rng)),
        );
        Ok(Network {
            spec: spec.clone(),
            layers,
            last_input: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[NamedLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer<T>] {
        &mut self.layers
    }

    pub fn num_4d_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.layer, Layer::Block4d(_)))
            .count()
    }

    pub fn first_4d_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.layer, Layer::Block4d(_)))
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn head(&self) -> &Head<T> {
        match &self.layers[self.head_index()].layer {
            Layer::Head(h) => h,
            _ => unreachable!("the last layer is always the head"),
        }
    }

    /// Same weights with every residual 4D block removed: the per-unit
    /// network whose averaged logits a zero-block model reproduces.
    pub fn without_4d_blocks(&self) -> Network<T> {
        let mut spec = self.spec.clone();
        spec.insertions.clear();
        let layers = self
            .layers
            .iter()
            .filter(|l| !matches!(l.layer, Layer::Block4d(_)))
            .cloned()
            .collect();
        Network {
            spec,
            layers,
            last_input: None,
        }
    }

    fn check_input(&self, v: &Tensor<T>) -> Result<(usize, usize)> {
        if v.rank() != 6 || v.shape()[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects (N, {}, U, T, H, W) input, got {:?}",
                self.spec.in_channels,
                v.shape()
            )));
        }
        let (n, u) = (v.shape()[0], v.shape()[2]);
        if self.num_4d_blocks() > 0 && u != self.spec.units {
            return Err(Error::shape(format!(
                "network with 4D blocks is built for {} units, input has {u}",
                self.spec.units
            )));
        }
        Ok((n, u))
    }

    /// Training-path forward; caches what [`Self::backward`] needs.
    pub fn forward(&mut self, v: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, u) = self.check_input(v)?;
        let mut x = to_unit_batch(v)?;
        for l in &mut self.layers {
            x = l
                .layer
                .forward(&x, u, mode)
                .map_err(|e| e.in_layer(&l.name))?;
        }
        self.last_input = Some((n, u, v.shape().to_vec()));
        Ok(x)
    }

    /// Eval-mode logits `(N, classes)` without touching any state.
    pub fn infer(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_with_hook(v, &mut |_, _| {})
    }

    /// Like [`Self::infer`], calling `hook(layer_name, output)` after every layer.
    pub fn infer_with_hook(
        &self,
        v: &Tensor<T>,
        hook: &mut dyn FnMut(&str, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        let (_, u) = self.check_input(v)?;
        let mut x = to_unit_batch(v)?;
        for l in &self.layers {
            x = l.layer.infer(&x, u).map_err(|e| e.in_layer(&l.name))?;
            hook(&l.name, &x);
        }
        Ok(x)
    }

    /// Eval-mode pass through `layers[range]` on unit-batched activations.
    pub fn infer_range(
        &self,
        range: Range<usize>,
        x: &Tensor<T>,
        units: usize,
    ) -> Result<Tensor<T>> {
        if range.end > self.layers.len() || range.start > range.end {
            return Err(Error::invalid(format!(
                "layer range {range:?} outside 0..{}",
                self.layers.len()
            )));
        }
        let mut x = x.clone();
        for l in &self.layers[range] {
            if let Layer::Block4d(b) = &l.layer {
                if b.units != units {
                    return Err(Error::shape(format!(
                        "{}: built for {} units, got {units}",
                        l.name, b.units
                    )));
                }
            }
            x = l.layer.infer(&x, units).map_err(|e| e.in_layer(&l.name))?;
        }
        Ok(x)
    }

    /// Eval-mode activations entering the head, `(N*U, C, T, H, W)`.
    pub fn features(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, u) = self.check_input(v)?;
        self.infer_range(0..self.head_index(), &to_unit_batch(v)?, u)
    }

    /// Backpropagate `d loss / d logits`; parameter gradients accumulate and
    /// the input gradient `(N, C, U, T, H, W)` is returned.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, u, _) = self
            .last_input
            .clone()
            .ok_or_else(|| Error::Model("backward called before forward".into()))?;
        let mut g = grad_logits.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.layer.backward(&g).map_err(|e| e.in_layer(&l.name))?;
        }
        from_unit_batch(g, u)
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(|l| l.layer.clear_cache());
        self.last_input = None;
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.layer.params_mut(&l.name))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Parameters and batch-norm running statistics by name.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor<T>> {
        let mut copy = Network {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            last_input: None,
        };
        copy.clear_caches();
        let mut out: BTreeMap<String, Tensor<T>> = copy
            .params_mut()
            .into_iter()
            .map(|p| (p.name, p.value.clone()))
            .collect();
        for l in &mut copy.layers {
            for (name, buf) in l.layer.buffers_mut(&l.name) {
                if let Some(t) = buf {
                    out.insert(name, t.clone());
                }
            }
        }
        out
    }

    /// Copy matching tensors in. Names the network has but `state` lacks are
    /// returned; with `strict` they are an error, as are unknown names.
    pub fn load_state(
        &mut self,
        state: &BTreeMap<String, Tensor<T>>,
        strict: bool,
    ) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        let mut used = 0;
        let mut assign = |name: String, dst: &mut Tensor<T>| -> Result<()> {
            match state.get(&name) {
                Some(src) => {
                    if src.shape() != dst.shape() {
                        return Err(Error::Model(format!(
                            "{name}: checkpoint shape {:?} != model shape {:?}",
                            src.shape(),
                            dst.shape()
                        )));
                    }
                    *dst = src.clone();
                    used += 1;
                }
                None => missing.push(name),
            }
            Ok(())
        };
        for l in &mut self.layers {
            for p in l.layer.params_mut(&l.name) {
                assign(p.name, p.value)?;
            }
            for (name, buf) in l.layer.buffers_mut(&l.name) {
                if let Some(dst) = buf {
                    assign(name, dst)?;
                }
            }
        }
        if strict && (!missing.is_empty() || used != state.len()) {
            return Err(Error::Model(format!(
                "state mismatch: {} missing ({:?}...), {} unexpected",
                missing.len(),
                missing.first(),
                state.len() - used
            )));
        }
        Ok(missing)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.layer {
                Layer::Conv(c) => c.unit.param_count(),
                Layer::MaxPool(_) => 0,
                Layer::Block(b) => b.param_count(),
                Layer::Block4d(b) => b.param_count(),
                Layer::Head(h) => h.param_count(),
            })
            .sum()
    }

    /// Output shapes, parameters and multiply-accumulates per layer for an
    /// `(N, C, U, T, H, W)` input, computed without running the network.
    pub fn trace(&self, input: [usize; 6]) -> Result<Vec<LayerTrace>> {
        let [n, c, u, t, h, w] = input;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "trace input has {c} channels, network takes {}",
                self.spec.in_channels
            )));
        }
        let batch = n * u;
        let mut dims = [t, h, w];
        let mut ch = c;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (params, macs, shape) = match &l.layer {
                Layer::Conv(cv) => {
                    let macs = cv.unit.macs(dims, batch)?;
                    dims = cv.unit.output_dims(dims)?;
                    ch = cv.unit.conv.out_channels();
                    (cv.unit.param_count(), macs, None)
                }
                Layer::MaxPool(p) => {
                    dims = p.window.output_dims(dims)?;
                    (0, 0, None)
                }
                Layer::Block(b) => {
                    let macs = b.macs(dims, batch)?;
                    dims = b.output_dims(dims)?;
                    ch = b.out_channels();
                    (b.param_count(), macs, None)
                }
                Layer::Block4d(b) => {
                    if u != b.units {
                        return Err(Error::shape(format!(
                            "{}: built for {} units, trace has {u}",
                            l.name, b.units
                        )));
                    }
                    (b.param_count(), b.macs(dims, n), None)
                }
                Layer::Head(hd) => (hd.param_count(), hd.macs(n), Some(vec![n, hd.classes()])),
            };
            out.push(LayerTrace {
                name: l.name.clone(),
                kind: l.layer.kind(),
                output_shape: shape.unwrap_or_else(|| vec![batch, ch, dims[0], dims[1], dims[2]]),
                params,
                macs,
            });
        }
        Ok(out)
    }

    pub fn macs(&self, input: [usize; 6]) -> Result<u64> {
        Ok(self.trace(input)?.iter().map(|t| t.macs).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(units: usize, with_4d: bool) -> NetworkSpec {
        NetworkSpec {
            depth: 18,
            num_classes: 3,
            units,
            in_channels: 2,
            width: 4,
            stages: 2,
            blocks: Some(vec![1, 1]),
            insertions: if with_4d {
                vec![Insertion {
                    stage: 2,
                    after_block: 0,
                    kernel: [3, 3, 1, 1],
                }]
            } else {
                vec![]
            },
            extra_res4_block: false,
            seed: 3,
        }
    }

    #[test]
    fn r18_shape_ladder() {
        let net = Network::<f32>::build(&NetworkSpec::i3d_r18(200)).unwrap();
        let trace = net.trace([1, 3, 1, 4, 224, 224]).unwrap();
        let shape = |name: &str| {
            trace
                .iter()
                .find(|t| t.name == name)
                .unwrap()
                .output_shape
                .clone()
        };
        assert_eq!(shape("conv1"), vec![1, 64, 4, 112, 112]);
        assert_eq!(shape("res2.1"), vec![1, 64, 4, 56, 56]);
        assert_eq!(shape("res3.1"), vec![1, 128, 4, 28, 28]);
        assert_eq!(shape("res4.1"), vec![1, 256, 4, 14, 14]);
        assert_eq!(shape("res5.1"), vec![1, 512, 4, 7, 7]);
        assert_eq!(shape("head"), vec![1, 200]);
    }

    #[test]
    fn names_and_counts() {
        let net = Network::<f32>::build(&NetworkSpec::v4d_r18(200, 4)).unwrap();
        let names: Vec<&str> = net.layers().iter().map(|l| l.name.as_str()).collect();
        assert!(names.contains(&"res3.fd1") && names.contains(&"res4.fd1"));
        assert_eq!(net.num_4d_blocks(), 2);
        let base = Network::<f32>::build(&NetworkSpec::i3d_r18(200)).unwrap();
        assert_eq!(net.without_4d_blocks().param_count(), base.param_count());
        assert_eq!(net.param_count() - base.param_count(), 147_840 + 590_592);
        assert_eq!(
            net.trace([1, 3, 4, 4, 64, 64])
                .unwrap()
                .iter()
                .map(|t| t.params)
                .sum::<usize>(),
            net.param_count()
        );
    }

    #[test]
    fn unit_count_is_enforced() {
        let net = Network::<f64>::build(&tiny(3, true)).unwrap();
        let v = Tensor::zeros(vec![1, 2, 2, 2, 16, 16]);
        assert!(matches!(net.infer(&v), Err(Error::Shape(_))));
        let plain = net.without_4d_blocks();
        assert_eq!(plain.infer(&v).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn forward_matches_infer_in_eval_mode() {
        let mut net = Network::<f64>::build(&tiny(3, true)).unwrap();
        let v = Tensor::from_fn(vec![2, 2, 3, 2, 16, 16], |i| {
            ((i.iter().sum::<usize>() * 7 % 11) as f64 - 5.0) / 3.0
        });
        let a = net.infer(&v).unwrap();
        let b = net.forward(&v, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let a = Network::<f32>::build(&tiny(3, true)).unwrap();
        let mut spec = tiny(3, true);
        spec.seed = 99;
        let mut b = Network::<f32>::build(&spec).unwrap();
        assert!(b.load_state(&a.state_dict(), true).unwrap().is_empty());
        assert_eq!(a.state_dict(), b.state_dict());

        let mut partial = a.state_dict();
        partial.retain(|k, _| !k.contains(".fd"));
        assert!(b.load_state(&partial, true).is_err());
        let missing = b.load_state(&partial, false).unwrap();
        assert!(missing.iter().all(|m| m.contains(".fd")) && !missing.is_empty());
    }
}
