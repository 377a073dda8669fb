#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v4d::checks::tiny_network_spec;
use v4d::network::Network;
use v4d::ops::Mode;
use v4d::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// The small gradient-check network with random 4D weights and running
/// statistics warmed up by a few training passes.
pub fn tiny_net(seed: u64) -> Network<f64> {
    let mut r = rng(seed);
    let mut net = Network::<f64>::build(&tiny_network_spec()).unwrap();
    for s in net.params_mut() {
        if s.in_4d_block && (s.name.ends_with(".weight") || s.name.ends_with(".bias")) {
            *s.value = uniform(s.value.shape(), &mut r).scale(0.3);
        }
    }
    warm_up(&mut net, &mut r);
    net
}

/// Same network with the 4D blocks left at their zero initialization.
pub fn tiny_zero_net(seed: u64) -> Network<f64> {
    let mut net = Network::<f64>::build(&tiny_network_spec()).unwrap();
    warm_up(&mut net, &mut rng(seed));
    net
}

fn warm_up(net: &mut Network<f64>, r: &mut ChaCha8Rng) {
    for _ in 0..3 {
        net.forward(&tiny_input(4, r), Mode::Train).unwrap();
    }
    net.clear_caches();
}

/// `(n, 2, 2, 2, 8, 8)` for the tiny network.
pub fn tiny_input(n: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(&[n, 2, 2, 2, 8, 8], r)
}
