//! Self-check suites run by the `gradcheck` and `equiv` commands: every
//! backward pass against central differences, and the two 4D convolution
//! routes against each other and against the brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Insertion, Network, NetworkSpec, Residual4dBlock};
use crate::ops::*;
use crate::oracle::{
    conv4d_reference, dilated_conv3d_reference, numerical_gradient, GradCheckReport,
};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Parameter elements probed per tensor in the end-to-end check.
const SAMPLES_PER_TENSOR: usize = 12;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Full central-difference comparison of one gradient; `f` is the scalar
/// loss as a function of the probed tensor.
fn check(
    report: &mut GradCheckReport,
    name: &str,
    analytic: &Tensor<f64>,
    at: &Tensor<f64>,
    f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<()> {
    let numeric = numerical_gradient(f, at, GRAD_STEP)?;
    report.compare(name, analytic, &numeric, GRAD_STEP, GRAD_TOLERANCE)?;
    Ok(())
}

fn conv3d_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let cases: [(&str, [usize; 3], [usize; 3], [usize; 3]); 2] = [
        ("conv3d", [3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ("conv3d_strided", [1, 3, 3], [1, 2, 2], [0, 1, 1]),
    ];
    for (name, k, stride, pad) in cases {
        let x = uniform(&[2, 2, 3, 5, 5], rng);
        let w = uniform(&[3, 2, k[0], k[1], k[2]], rng);
        let b = uniform(&[3], rng);
        let p = Conv3dParams::new(w.clone(), b.clone(), stride, pad)?;
        let r = uniform(conv3d_forward(&x, &p)?.shape(), rng);
        let g = conv3d_backward(&x, &p, &r)?;
        check(report, &format!("{name}.input"), &g.input, &x, |t| {
            Ok(dot(&conv3d_forward(t, &p)?, &r))
        })?;
        check(report, &format!("{name}.weight"), &g.weights, &w, |t| {
            Ok(dot(
                &conv3d_forward(&x, &Conv3dParams::new(t.clone(), b.clone(), stride, pad)?)?,
                &r,
            ))
        })?;
        check(report, &format!("{name}.bias"), &g.bias, &b, |t| {
            Ok(dot(
                &conv3d_forward(&x, &Conv3dParams::new(w.clone(), t.clone(), stride, pad)?)?,
                &r,
            ))
        })?;
    }
    Ok(())
}

fn conv4d_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, k) in [
        ("conv4d_3x1x1x1", [3, 1, 1, 1]),
        ("conv4d_3x3x1x1", [3, 3, 1, 1]),
        ("conv4d_3x3x3x3", [3, 3, 3, 3]),
    ] {
        let v = uniform(&[1, 2, 3, 3, 3, 3], rng);
        let w = uniform(&[2, 2, k[0], k[1], k[2], k[3]], rng);
        let b = uniform(&[2], rng);
        let p = Conv4dParams::same(w.clone(), b.clone())?;
        let r = uniform(v.shape(), rng);
        let g = conv4d_backward(&v, &p, &r)?;
        check(report, &format!("{name}.input"), &g.input, &v, |t| {
            Ok(dot(&conv4d_forward_decomposed(t, &p)?, &r))
        })?;
        check(report, &format!("{name}.weight"), &g.weights, &w, |t| {
            Ok(dot(
                &conv4d_forward_decomposed(&v, &Conv4dParams::same(t.clone(), b.clone())?)?,
                &r,
            ))
        })?;
        check(report, &format!("{name}.bias"), &g.bias, &b, |t| {
            Ok(dot(
                &conv4d_forward_decomposed(&v, &Conv4dParams::same(w.clone(), t.clone())?)?,
                &r,
            ))
        })?;
    }
    Ok(())
}

fn batchnorm_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    for (label, mode) in [
        ("batchnorm_train", Mode::Train),
        ("batchnorm_eval", Mode::Eval),
    ] {
        let x = uniform(&[3, 2, 2, 3, 3], rng);
        let mut p = BatchNormParams::<f64>::new(2);
        p.gamma = uniform(&[2], rng).map(|v| v + 1.5);
        p.beta = uniform(&[2], rng);
        p.running_mean = Some(uniform(&[2], rng));
        p.running_var = Some(uniform(&[2], rng).map(|v| v + 1.5));
        let r = uniform(x.shape(), rng);
        let run =
            |x: &Tensor<f64>, p: &BatchNormParams<f64>| -> Result<(Tensor<f64>, BnCache<f64>)> {
                let mut q = p.clone();
                batchnorm_forward(x, &mut q, mode)
            };
        let (_, cache) = run(&x, &p)?;
        let g = batchnorm_backward(&cache, &p, &r)?;
        check(report, &format!("{label}.input"), &g.input, &x, |t| {
            Ok(dot(&run(t, &p)?.0, &r))
        })?;
        check(report, &format!("{label}.gamma"), &g.gamma, &p.gamma, |t| {
            Ok(dot(
                &run(
                    &x,
                    &BatchNormParams {
                        gamma: t.clone(),
                        ..p.clone()
                    },
                )?
                .0,
                &r,
            ))
        })?;
        check(report, &format!("{label}.beta"), &g.beta, &p.beta, |t| {
            Ok(dot(
                &run(
                    &x,
                    &BatchNormParams {
                        beta: t.clone(),
                        ..p.clone()
                    },
                )?
                .0,
                &r,
            ))
        })?;
    }
    Ok(())
}

fn pointwise_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    // Keep every entry clear of the kink so the step never straddles it.
    let x = uniform(&[2, 3, 2, 3, 3], rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let r = uniform(x.shape(), rng);
    check(report, "relu.input", &relu_backward(&x, &r)?, &x, |t| {
        Ok(dot(&relu(t), &r))
    })?;

    let win = PoolWindow {
        kernel: [1, 3, 3],
        stride: [1, 2, 2],
        padding: [0, 1, 1],
    };
    let x = uniform(&[2, 2, 2, 5, 5], rng);
    let (y, argmax) = maxpool3d(&x, win)?;
    let r = uniform(y.shape(), rng);
    let g = maxpool3d_backward(x.shape(), &argmax, &r)?;
    check(report, "maxpool.input", &g, &x, |t| {
        Ok(dot(&maxpool3d(t, win)?.0, &r))
    })?;

    let x = uniform(&[2, 3, 2, 3, 3], rng);
    let r = uniform(&[2, 3], rng);
    let g = global_avg_pool_backward(x.shape(), &r)?;
    check(report, "global_avg_pool.input", &g, &x, |t| {
        Ok(dot(&global_avg_pool(t)?, &r))
    })?;

    let x = uniform(&[3, 4], rng);
    let w = uniform(&[5, 4], rng);
    let b = uniform(&[5], rng);
    let r = uniform(&[3, 5], rng);
    let g = fully_connected_backward(&x, &w, &b, &r)?;
    check(report, "fc.input", &g.input, &x, |t| {
        Ok(dot(&fully_connected(t, &w, &b)?, &r))
    })?;
    check(report, "fc.weight", &g.weights, &w, |t| {
        Ok(dot(&fully_connected(&x, t, &b)?, &r))
    })?;
    check(report, "fc.bias", &g.bias, &b, |t| {
        Ok(dot(&fully_connected(&x, &w, t)?, &r))
    })?;

    let logits = uniform(&[4, 5], rng).scale(3.0);
    let labels = [0, 4, 2, 2];
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    check(report, "softmax_cross_entropy.logits", &g, &logits, |t| {
        Ok(softmax_cross_entropy(t, &labels)?.0)
    })?;
    Ok(())
}

fn set_param(net: &mut Network<f64>, name: &str, i: usize, v: f64) {
    for s in net.params_mut() {
        if s.name == name {
            s.value.data_mut()[i] = v;
        }
    }
}

fn residual4d_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let units = 3;
    // Eval mode covers the conv bias, which batch statistics would cancel.
    for (label, mode) in [
        ("residual4d_train", Mode::Train),
        ("residual4d_eval", Mode::Eval),
    ] {
        let conv = Conv4dParams::same(uniform(&[2, 2, 3, 3, 1, 1], rng), uniform(&[2], rng))?;
        let mut block = Residual4dBlock::new(conv, units)?;
        block.bn.gamma = uniform(&[2], rng).map(|v| v + 1.5);
        block.bn.beta = uniform(&[2], rng).scale(0.5);
        let x = uniform(&[2 * units, 2, 3, 3, 3], rng);
        let r = uniform(x.shape(), rng);
        let template = block.clone();
        let loss_of = |b: &Residual4dBlock<f64>, x: &Tensor<f64>| -> Result<f64> {
            let mut b = b.clone();
            Ok(dot(&b.forward(x, mode)?, &r))
        };
        block.forward(&x, mode)?;
        let gx = block.backward(&r)?;
        check(report, &format!("{label}.input"), &gx, &x, |t| {
            loss_of(&template, t)
        })?;

        let slots: Vec<(String, Tensor<f64>, Tensor<f64>)> = block
            .params_mut("block")
            .into_iter()
            .map(|s| (s.name, s.value.clone(), s.grad.clone()))
            .collect();
        for (name, value, grad) in slots {
            if mode == Mode::Train && name.ends_with("conv4d.bias") {
                continue;
            }
            check(
                report,
                &format!("{label}.{}", name.trim_start_matches("block.")),
                &grad,
                &value,
                |t| {
                    let mut b = template.clone();
                    for s in b.params_mut("block") {
                        if s.name == name {
                            *s.value = t.clone();
                        }
                    }
                    loss_of(&b, &x)
                },
            )?;
        }
    }
    Ok(())
}

/// Depth-18 network truncated to one block per stage, 8x8 frames, with a
/// randomly initialized residual 4D block after res3.
pub fn tiny_network_spec() -> NetworkSpec {
    NetworkSpec {
        depth: 18,
        num_classes: 3,
        units: 2,
        in_channels: 2,
        width: 4,
        stages: 4,
        blocks: Some(vec![1, 1, 1, 1]),
        insertions: vec![Insertion {
            stage: 3,
            after_block: 0,
            kernel: [3, 3, 1, 1],
        }],
        extra_res4_block: false,
        seed: 11,
    }
}

fn end_to_end_checks(report: &mut GradCheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut net = Network::<f64>::build(&tiny_network_spec())?;
    for s in net.params_mut() {
        if s.in_4d_block && matches!(s.name.rsplit('.').next(), Some("weight") | Some("bias")) {
            *s.value = uniform(s.value.shape(), rng).scale(0.3);
        }
    }
    let x = uniform(&[2, 2, 2, 2, 8, 8], rng);
    let labels = [1, 2];
    let loss_of = |net: &Network<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut n = net.clone();
        Ok(softmax_cross_entropy(&n.forward(x, Mode::Train)?, &labels)?.0)
    };
    let template = net.clone();
    net.zero_grads();
    let (_, g) = softmax_cross_entropy(&net.forward(&x, Mode::Train)?, &labels)?;
    let gx = net.backward(&g)?;
    let numeric = numerical_gradient(|t| loss_of(&template, t), &x, GRAD_STEP)?;
    report.compare(
        "end_to_end.input",
        &gx,
        &numeric,
        GRAD_STEP,
        END_TO_END_TOLERANCE,
    )?;

    let slots: Vec<(String, Tensor<f64>, Tensor<f64>, bool)> = net
        .params_mut()
        .into_iter()
        .map(|s| {
            // A bias feeding training-mode batch norm has an identically zero gradient.
            let cancelled = s.in_4d_block && s.name.ends_with(".bias");
            (s.name, s.value.clone(), s.grad.clone(), cancelled)
        })
        .collect();
    for (name, value, grad, cancelled) in slots {
        if cancelled {
            continue;
        }
        let mut indices: Vec<usize> = (0..value.len()).collect();
        if indices.len() > SAMPLES_PER_TENSOR {
            // The largest analytic entries plus a random draw, so sparse
            // gradients are not judged on structural zeros alone.
            indices.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
            indices.truncate(SAMPLES_PER_TENSOR / 3);
            while indices.len() < SAMPLES_PER_TENSOR {
                indices.push(rng.random_range(0..value.len()));
            }
        }
        let mut probe = template.clone();
        let mut numeric = Vec::with_capacity(indices.len());
        for &i in &indices {
            let orig = value.data()[i];
            set_param(&mut probe, &name, i, orig + GRAD_STEP);
            let plus = loss_of(&probe, &x)?;
            set_param(&mut probe, &name, i, orig - GRAD_STEP);
            let minus = loss_of(&probe, &x)?;
            set_param(&mut probe, &name, i, orig);
            numeric.push((plus - minus) / (2.0 * GRAD_STEP));
        }
        let pairs = indices
            .iter()
            .zip(&numeric)
            .map(|(&i, &n)| (value.unravel(i), grad.data()[i], n));
        report.compare_pairs(
            &format!("end_to_end.{name}"),
            pairs,
            GRAD_STEP,
            END_TO_END_TOLERANCE,
        );
    }
    Ok(())
}

/// Every backward pass against central differences at `f64`.
pub fn gradient_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    conv3d_checks(&mut report, &mut rng)?;
    conv4d_checks(&mut report, &mut rng)?;
    batchnorm_checks(&mut report, &mut rng)?;
    pointwise_checks(&mut report, &mut rng)?;
    residual4d_checks(&mut report, &mut rng)?;
    end_to_end_checks(&mut report, &mut rng)?;
    Ok(report)
}

pub const EQUIV_F64_TOLERANCE: f64 = 1e-10;
pub const EQUIV_F32_TOLERANCE: f64 = 1e-4;
pub const REFERENCE_DIRECT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct FormSummary {
    pub form: String,
    pub cases: usize,
    /// max |direct - decomposed| at f64.
    pub max_abs_f64: f64,
    /// max |direct - decomposed| / max |direct| at f32.
    pub max_rel_f32: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub forms: Vec<FormSummary>,
    pub max_abs_f64: f64,
    pub max_rel_f32: f64,
    pub reference_cases: usize,
    /// Brute-force loop against the direct route.
    pub reference_vs_direct: f64,
    pub reference_vs_decomposed: f64,
    pub dilated_cases: usize,
    /// Unit-only kernel against a dilated 3D convolution over concatenated units.
    pub dilated_vs_direct: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_abs_f64 < EQUIV_F64_TOLERANCE
            && self.max_rel_f32 < EQUIV_F32_TOLERANCE
            && self.reference_vs_direct <= REFERENCE_DIRECT_TOLERANCE
            && self.reference_vs_decomposed <= EQUIV_F64_TOLERANCE
            && self.dilated_vs_direct <= EQUIV_F64_TOLERANCE
    }
}

const FORMS: [&str; 3] = ["unit_only", "unit_time", "full"];

/// A random case with extents at most 6 and at most 2 channels each way.
fn random_case(form: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let odd = |rng: &mut ChaCha8Rng, max: usize| 2 * rng.random_range(0..=(max - 1) / 2) + 1;
    let kernel = match form {
        0 => [odd(rng, 5), 1, 1, 1],
        1 => {
            let k = odd(rng, 5);
            [k, k, 1, 1]
        }
        _ => {
            let k = odd(rng, 3);
            [k, k, k, k]
        }
    };
    let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let n = rng.random_range(1..=2);
    let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=6)).collect();
    let shape = [n, cin, dims[0], dims[1], dims[2], dims[3]];
    let v = uniform(&shape, rng);
    let w = uniform(
        &[cout, cin, kernel[0], kernel[1], kernel[2], kernel[3]],
        rng,
    );
    let b = uniform(&[cout], rng);
    (v, w, b)
}

/// `cases` random configurations cycling through the three kernel forms,
/// then the oracle cross-checks.
pub fn equivalence_suite(cases: usize, seed: u64) -> Result<EquivalenceReport> {
    if cases == 0 {
        return Err(Error::invalid("equivalence suite needs at least one case"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forms: Vec<FormSummary> = FORMS
        .iter()
        .map(|f| FormSummary {
            form: f.to_string(),
            cases: 0,
            max_abs_f64: 0.0,
            max_rel_f32: 0.0,
        })
        .collect();
    for i in 0..cases {
        let form = i % FORMS.len();
        let (v, w, b) = random_case(form, &mut rng);
        let p = Conv4dParams::same(w, b)?;
        let direct = conv4d_forward_direct(&v, &p)?;
        let decomposed = conv4d_forward_decomposed(&v, &p)?;
        let p32 = Conv4dParams::same(p.weights.cast::<f32>(), p.bias.cast::<f32>())?;
        let v32 = v.cast::<f32>();
        let diff32 = conv4d_forward_direct(&v32, &p32)?
            .max_abs_diff(&conv4d_forward_decomposed(&v32, &p32)?)?;
        let s = &mut forms[form];
        s.cases += 1;
        s.max_abs_f64 = s.max_abs_f64.max(direct.max_abs_diff(&decomposed)?);
        s.max_rel_f32 = s
            .max_rel_f32
            .max(diff32 as f64 / direct.max_abs().max(1e-12));
    }

    let reference_cases = 50;
    let (mut ref_direct, mut ref_decomposed) = (0.0f64, 0.0f64);
    for i in 0..reference_cases {
        let (v, w, b) = random_case(i % FORMS.len(), &mut rng);
        let expect = conv4d_reference(&v, &w, b.data())?;
        let p = Conv4dParams::same(w, b)?;
        ref_direct = ref_direct.max(expect.max_abs_diff(&conv4d_forward_direct(&v, &p)?)?);
        ref_decomposed =
            ref_decomposed.max(expect.max_abs_diff(&conv4d_forward_decomposed(&v, &p)?)?);
    }

    let dilated_cases = 20;
    let mut dilated = 0.0f64;
    for i in 0..dilated_cases {
        // The first case is the canonical U=4, T=3; the kernel always
        // reaches past the first and last unit.
        let (units, frames) = if i == 0 {
            (4, 3)
        } else {
            (rng.random_range(1..=6), rng.random_range(1..=4))
        };
        let s = 2 * rng.random_range(1..=2) + 1;
        let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let (h, wd) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let v = uniform(&[1, cin, units, frames, h, wd], &mut rng);
        let w = uniform(&[cout, cin, s, 1, 1, 1], &mut rng);
        let b = uniform(&[cout], &mut rng);
        let expect = dilated_conv3d_reference(&v.index_outer(0)?, &w, b.data())?;
        let got = conv4d_forward_direct(&v, &Conv4dParams::same(w, b)?)?.index_outer(0)?;
        dilated = dilated.max(expect.max_abs_diff(&got)?);
    }

    Ok(EquivalenceReport {
        cases,
        max_abs_f64: forms.iter().map(|f| f.max_abs_f64).fold(0.0, f64::max),
        max_rel_f32: forms.iter().map(|f| f.max_rel_f32).fold(0.0, f64::max),
        forms,
        reference_cases,
        reference_vs_direct: ref_direct,
        reference_vs_decomposed: ref_decomposed,
        dilated_cases,
        dilated_vs_direct: dilated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let report = gradient_suite(3).unwrap();
        for e in &report.entries {
            eprintln!(
                "{:<40} {:>10.3e} n={}",
                e.name, e.max_relative_error, e.checked
            );
        }
        assert!(report.passed(), "{:#?}", report.failures());
    }

    #[test]
    fn equivalence_suite_passes() {
        let report = equivalence_suite(30, 5).unwrap();
        eprintln!("{report:#?}");
        assert!(report.passed());
        assert!(report.forms.iter().all(|f| f.cases == 10));
    }
}
