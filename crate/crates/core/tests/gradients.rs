mod common;

use common::{rng, tiny_input, tiny_zero_net};
use v4d::checks::{gradient_suite, END_TO_END_TOLERANCE};
use v4d::network::Network;
use v4d::ops::{softmax_cross_entropy, Mode};
use v4d::oracle::relative_error;
use v4d::Tensor;

#[test]
fn every_backward_pass_matches_central_differences() {
    for seed in [3, 19] {
        let report = gradient_suite(seed).unwrap();
        let failures: Vec<String> = report
            .failures()
            .iter()
            .map(|e| {
                format!(
                    "{} ({:.2e} > {:.0e})",
                    e.name, e.max_relative_error, e.tolerance
                )
            })
            .collect();
        assert!(failures.is_empty(), "seed {seed}: {}", failures.join(", "));
        assert!(report.entries.len() > 30);
    }
}

fn loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut n = net.clone();
    softmax_cross_entropy(&n.forward(x, Mode::Train).unwrap(), labels)
        .unwrap()
        .0
}

/// A zero-initialized 4D block sits exactly on the ReLU kink, yet its
/// weights still receive a gradient, so full training can move them.
#[test]
fn zero_4d_block_weights_get_a_true_gradient() {
    let mut net = tiny_zero_net(1);
    let x = tiny_input(2, &mut rng(6));
    let labels = [0, 2];
    let template = net.clone();
    net.zero_grads();
    let (_, g) = softmax_cross_entropy(&net.forward(&x, Mode::Train).unwrap(), &labels).unwrap();
    net.backward(&g).unwrap();
    let (name, grad) = net
        .params_mut()
        .into_iter()
        .find(|s| s.in_4d_block && s.name.ends_with("conv4d.weight"))
        .map(|s| (s.name, s.grad.clone()))
        .unwrap();
    assert!(grad.max_abs() > 1e-6, "zero block received no gradient");

    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    // Tiny step: one-sided second-order terms grow with the step through
    // the near-zero batch variance.
    let h = 1e-7;
    let mut worst = 0.0f64;
    for &i in order.iter().take(10) {
        let shifted = |delta: f64| {
            let mut probe = template.clone();
            for s in probe.params_mut() {
                if s.name == name {
                    s.value.data_mut()[i] = delta;
                }
            }
            loss(&probe, &x, &labels)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    assert!(
        worst < END_TO_END_TOLERANCE,
        "max relative error {worst:.3e}"
    );
}
