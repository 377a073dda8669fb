//! Production kernels and network paths against brute-force references.

mod common;

use common::{rng, tiny_input, tiny_net, tiny_zero_net, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use v4d::inference::{enumerate_combinations, split_at_first_4d, v4d_infer, Averaging};
use v4d::network::{Layer, Residual4dBlock};
use v4d::ops::{
    conv3d_forward, conv4d_forward_decomposed, conv4d_forward_direct, Conv3dParams, Conv4dParams,
    Mode,
};
use v4d::oracle::{
    conv3d_reference, conv4d_reference, dilated_conv3d_reference, tsn_forward_reference,
};
use v4d::Tensor;

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv3d_matches_reference(
        seed in any::<u64>(),
        cin in 1usize..4, cout in 1usize..4,
        k in prop::array::uniform3(1usize..4),
        stride in prop::array::uniform3(1usize..3),
        pad in prop::array::uniform3(0usize..2),
        dims in prop::array::uniform3(3usize..7),
    ) {
        let mut r = rng(seed);
        let x = uniform(&[2, cin, dims[0], dims[1], dims[2]], &mut r);
        let w = uniform(&[cout, cin, k[0], k[1], k[2]], &mut r);
        let b = uniform(&[cout], &mut r);
        let p = Conv3dParams::new(w.clone(), b.clone(), stride, pad).unwrap();
        let got = conv3d_forward(&x, &p).unwrap();
        let want = conv3d_reference(&x, &w, b.data(), stride, pad, [1, 1, 1]).unwrap();
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn conv4d_routes_match_reference(
        seed in any::<u64>(),
        k in prop::array::uniform4(prop::sample::select(vec![1usize, 3])),
        dims in prop::array::uniform4(1usize..5),
    ) {
        let mut r = rng(seed);
        let v = uniform(&[1, 2, dims[0], dims[1], dims[2], dims[3]], &mut r);
        let w = uniform(&[2, 2, k[0], k[1], k[2], k[3]], &mut r);
        let b = uniform(&[2], &mut r);
        let p = Conv4dParams::same(w.clone(), b.clone()).unwrap();
        let want = conv4d_reference(&v, &w, b.data()).unwrap();
        prop_assert!(conv4d_forward_direct(&v, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
        prop_assert!(conv4d_forward_decomposed(&v, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    /// A `k x 1 x 1 x 1` kernel is a 3D convolution along concatenated
    /// units with temporal dilation `T`.
    #[test]
    fn unit_only_kernel_is_dilated_conv3d(
        seed in any::<u64>(),
        s in prop::sample::select(vec![1usize, 3, 5]),
        u in 1usize..6, t in 1usize..5, hw in 1usize..4, c in 1usize..3,
    ) {
        let mut r = rng(seed);
        let v = uniform(&[1, c, u, t, hw, hw], &mut r);
        let w = uniform(&[c, c, s, 1, 1, 1], &mut r);
        let b = uniform(&[c], &mut r);
        let p = Conv4dParams::same(w.clone(), b.clone()).unwrap();
        let got = conv4d_forward_decomposed(&v, &p).unwrap();
        let volume = v.clone().reshape(vec![c, u, t, hw, hw]).unwrap();
        let want = dilated_conv3d_reference(&volume, &w, b.data()).unwrap();
        prop_assert!(max_diff(got.data(), want.data()) <= 1e-10);
    }

    /// With zero 4D blocks the network is segment averaging of its 3D trunk,
    /// and so blind to unit order.
    #[test]
    fn zero_blocks_reduce_to_segment_averaging(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let net = tiny_zero_net(seed % 7);
        let mut r = rng(seed);
        let x = tiny_input(2, &mut r);
        let logits = net.infer(&x).unwrap();
        let tsn = tsn_forward_reference(&net, &x).unwrap();
        prop_assert!(logits.max_abs_diff(&tsn).unwrap() <= 1e-6);

        let mut order = [0, 1];
        order.shuffle(&mut rng(perm_seed));
        let parts: Vec<Tensor<f64>> = order.iter().map(|&i| x.narrow(2, i, 1).unwrap()).collect();
        let permuted = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 2).unwrap();
        prop_assert!(net.infer(&permuted).unwrap().max_abs_diff(&logits).unwrap() <= 1e-6);
    }

    #[test]
    fn split_composition_is_the_forward_pass(seed in any::<u64>()) {
        let net = tiny_net(seed % 5);
        let x = tiny_input(2, &mut rng(seed));
        let split = split_at_first_4d(&net).unwrap();
        let units_first = x.permute_axes(1, 2).unwrap().merge_axis_into_batch().unwrap();
        let composed = split.n4d(&split.n3d(&units_first).unwrap()).unwrap();
        prop_assert!(composed.max_abs_diff(&net.infer(&x).unwrap()).unwrap() <= 1e-6);
    }
}

#[test]
fn residual_4d_block_matches_composed_primitives() {
    let mut r = rng(21);
    let units = 3;
    let w = uniform(&[2, 2, 3, 3, 1, 1], &mut r);
    let b = uniform(&[2], &mut r);
    let mut block =
        Residual4dBlock::new(Conv4dParams::same(w.clone(), b.clone()).unwrap(), units).unwrap();
    block.bn.gamma = uniform(&[2], &mut r).map(|v| v + 1.5);
    block.bn.beta = uniform(&[2], &mut r);
    block.bn.running_mean = Some(uniform(&[2], &mut r));
    block.bn.running_var = Some(uniform(&[2], &mut r).map(|v| v + 1.5));
    let x = uniform(&[2 * units, 2, 3, 4, 4], &mut r);

    // (N*U, C, T, H, W) -> (N, C, U, T, H, W), literal 4D convolution,
    // eval batch norm and ReLU written out, back to (N*U, C, T, H, W).
    let volume = x
        .clone()
        .split_batch_axis(units)
        .unwrap()
        .permute_axes(1, 2)
        .unwrap();
    let mixed = conv4d_reference(&volume, &w, b.data())
        .unwrap()
        .permute_axes(1, 2)
        .unwrap();
    let mixed = mixed.merge_axis_into_batch().unwrap();
    let (mean, var) = (
        block.bn.running_mean.clone().unwrap(),
        block.bn.running_var.clone().unwrap(),
    );
    let per_channel = 3 * 4 * 4;
    let want: Vec<f64> = mixed
        .data()
        .iter()
        .zip(x.data())
        .enumerate()
        .map(|(i, (&m, &xi))| {
            let c = (i / per_channel) % 2;
            let bn = (m - mean.data()[c]) / (var.data()[c] + block.bn.epsilon).sqrt()
                * block.bn.gamma.data()[c]
                + block.bn.beta.data()[c];
            xi + bn.max(0.0)
        })
        .collect();

    let got = block.infer(&x).unwrap();
    assert!(max_diff(got.data(), &want) <= 1e-6);
    let trained = block.forward(&x, Mode::Eval).unwrap();
    assert!(max_diff(trained.data(), &want) <= 1e-6);
}

#[test]
fn residual_4d_block_in_network_matches_standalone() {
    let net = tiny_net(2);
    let at = net.first_4d_index().unwrap();
    let Layer::Block4d(block) = &net.layers()[at].layer else {
        panic!("expected a 4D block")
    };
    let x = tiny_input(2, &mut rng(8));
    let units_first = x
        .permute_axes(1, 2)
        .unwrap()
        .merge_axis_into_batch()
        .unwrap();
    let before = net.infer_range(0..at, &units_first, 1).unwrap();
    let after = net.infer_range(at..at + 1, &before, 2).unwrap();
    assert!(after.max_abs_diff(&block.infer(&before).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn v4d_infer_is_the_mean_over_combinations_in_any_order() {
    let net = tiny_net(4);
    let mut r = rng(17);
    let u_infer = 5;
    let crops: Vec<Tensor<f64>> = (0..2)
        .map(|_| uniform(&[2, u_infer, 2, 8, 8], &mut r))
        .collect();
    let pred = v4d_infer(&net, &crops, Averaging::Logits).unwrap();
    assert_eq!(pred.combinations_used, 6);
    assert_eq!(pred.crops_used, 2);
    assert!((pred.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut combos: Vec<(usize, Vec<usize>)> = (0..crops.len())
        .flat_map(|c| {
            enumerate_combinations(u_infer, 2)
                .unwrap()
                .into_iter()
                .map(move |k| (c, k))
        })
        .collect();
    for shuffle_seed in 0..4 {
        combos.shuffle(&mut rng(shuffle_seed));
        let mut sum = [0.0; 3];
        for (c, combo) in &combos {
            let parts: Vec<Tensor<f64>> = combo
                .iter()
                .map(|&u| crops[*c].narrow(1, u, 1).unwrap())
                .collect();
            let clip = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1).unwrap();
            let shape = [&[1][..], clip.shape()].concat();
            let logits = net.infer(&clip.reshape(shape).unwrap()).unwrap();
            sum.iter_mut().zip(logits.data()).for_each(|(s, v)| *s += v);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / combos.len() as f64).collect();
        assert!(max_diff(&softmax(&mean), &pred.class_probs) <= 1e-9);
    }

    let probs = v4d_infer(&net, &crops, Averaging::Probabilities).unwrap();
    assert!((probs.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
