//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{rng, uniform};
use rand::seq::SliceRandom;
use v4d::checks::{
    equivalence_suite, gradient_suite, tiny_network_spec, EQUIV_F32_TOLERANCE, EQUIV_F64_TOLERANCE,
};
use v4d::inference::enumerate_combinations;
use v4d::network::{Network, NetworkSpec};
use v4d::ops::Mode;
use v4d::oracle::tsn_forward_reference;
use v4d::tensor::write_vt01;
use v4d::training::{
    accuracy, make_order_task, motif_units, staged_train, OrderTaskSpec, StagedConfig, StagedData,
};
use v4d::Tensor;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn routes_agree() -> Outcome {
    let r = equivalence_suite(100, 0).map_err(|e| e.to_string())?;
    verdict(
        r.cases == 100
            && r.max_abs_f64 < EQUIV_F64_TOLERANCE
            && r.max_rel_f32 < EQUIV_F32_TOLERANCE,
        format!(
            "{} cases, f64 max abs {:.2e}, f32 max rel {:.2e}",
            r.cases, r.max_abs_f64, r.max_rel_f32
        ),
    )
}

fn gradients() -> Outcome {
    let r = gradient_suite(3).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = r.failures().iter().map(|e| e.name.as_str()).collect();
    verdict(
        failed.is_empty(),
        format!(
            "{} gradients, max rel err {:.2e}; failing: {failed:?}",
            r.entries.len(),
            r.max_error()
        ),
    )
}

fn tsn_reduction() -> Outcome {
    let spec = NetworkSpec {
        units: 4,
        ..tiny_network_spec()
    };
    let mut net = Network::<f64>::build(&spec).map_err(|e| e.to_string())?;
    let mut r = rng(30);
    for _ in 0..3 {
        net.forward(&uniform(&[4, 2, 4, 2, 8, 8], &mut r), Mode::Train)
            .map_err(|e| e.to_string())?;
    }
    let (mut reduction, mut permutation) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = uniform(&[1, 2, 4, 2, 8, 8], &mut r);
        let logits = net.infer(&x).map_err(|e| e.to_string())?;
        reduction = reduction.max(
            logits
                .max_abs_diff(&tsn_forward_reference(&net, &x).unwrap())
                .unwrap(),
        );
        let mut order = [0, 1, 2, 3];
        order.shuffle(&mut r);
        let parts: Vec<Tensor<f64>> = order.iter().map(|&i| x.narrow(2, i, 1).unwrap()).collect();
        let permuted = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 2).unwrap();
        permutation = permutation.max(net.infer(&permuted).unwrap().max_abs_diff(&logits).unwrap());
    }
    verdict(
        reduction <= 1e-6 && permutation <= 1e-6,
        format!("20 inputs, |net - segment average| {reduction:.2e}, unit permutation {permutation:.2e}"),
    )
}

fn dilated_reduction() -> Outcome {
    let r = equivalence_suite(3, 1).map_err(|e| e.to_string())?;
    verdict(
        r.dilated_cases >= 20 && r.dilated_vs_direct <= 1e-10,
        format!(
            "{} cases, max abs {:.2e}",
            r.dilated_cases, r.dilated_vs_direct
        ),
    )
}

fn params(spec: &NetworkSpec) -> f64 {
    Network::<f32>::build(spec).unwrap().param_count() as f64 / 1e6
}

fn param_counts() -> Outcome {
    let i3d = params(&NetworkSpec::i3d_r18(200));
    let v4d = params(&NetworkSpec::v4d_r18(200, 4));
    let delta = v4d - i3d;
    let within = |got: f64, want: f64, tol: f64| (got - want).abs() <= tol * want;
    verdict(
        within(i3d, 32.3, 0.03) && within(v4d, 33.1, 0.03) && within(delta, 0.8, 0.10),
        format!(
            "I3D-R18 {i3d:.2}M (32.3M), V4D-R18 {v4d:.2}M (33.1M), 4D blocks {delta:.3}M (0.8M)"
        ),
    )
}

fn mac_ratio() -> Outcome {
    let v4d = Network::<f32>::build(&NetworkSpec::v4d_r18(200, 4))
        .unwrap()
        .macs([1, 3, 4, 4, 224, 224])
        .unwrap();
    let i3d = Network::<f32>::build(&NetworkSpec::i3d_r18(200))
        .unwrap()
        .macs([1, 3, 1, 16, 224, 224])
        .unwrap();
    let ratio = v4d as f64 / i3d as f64;
    verdict(
        (ratio - 1.067).abs() <= 0.03,
        format!(
            "V4D 4x4 {:.2}G / I3D 16 frames {:.2}G = {ratio:.3}",
            v4d as f64 / 1e9,
            i3d as f64 / 1e9
        ),
    )
}

fn shape_ladder() -> Outcome {
    let net = Network::<f32>::build(&NetworkSpec::v4d_r18(200, 4)).unwrap();
    let x = Tensor::<f32>::from_fn(vec![1, 3, 4, 4, 224, 224], |i| {
        ((i[4] * 7 + i[5] * 3 + i[2]) % 13) as f32 / 13.0
    });
    let mut seen: Vec<(String, Vec<usize>)> = Vec::new();
    net.infer_with_hook(&x, &mut |name, t| {
        seen.push((name.to_string(), t.shape().to_vec()))
    })
    .map_err(|e| e.to_string())?;
    let side = |prefix: &str| {
        seen.iter()
            .rev()
            .find(|(n, s)| n.starts_with(prefix) && s.len() == 5)
            .map(|(_, s)| s[3])
    };
    let ladder: Vec<Option<usize>> = ["conv1", "res2.", "res3.", "res4.", "res5."]
        .iter()
        .map(|p| side(p))
        .collect();
    let frames_kept = seen
        .iter()
        .filter(|(_, s)| s.len() == 5)
        .all(|(_, s)| s[2] == 4);
    let want = [112, 56, 28, 14, 7].map(Some);
    verdict(
        ladder == want && frames_kept,
        format!("stage sides {ladder:?}, T = 4 in every layer: {frames_kept}"),
    )
}

fn combination_counts() -> Outcome {
    let counts: Vec<usize> = [(8, 4), (4, 4), (10, 4)]
        .iter()
        .map(|&(u, k)| enumerate_combinations(u, k).unwrap().len())
        .collect();
    verdict(
        counts == [16, 1, 36],
        format!(
            "(8,4) {}, (4,4) {}, (10,4) {}",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn order_task() -> Outcome {
    let spec = OrderTaskSpec::default();
    let (train, test) = make_order_task(&spec).map_err(|e| e.to_string())?;
    let stage1 = motif_units(&spec, 2000, spec.seed.wrapping_add(7)).map_err(|e| e.to_string())?;
    let cfg = StagedConfig::order_experiment(&spec);
    let out = staged_train(
        &cfg,
        &StagedData {
            stage1: &stage1,
            train: &train,
            eval: None,
        },
        None,
        None,
    )
    .map_err(|e| e.to_string())?;
    let zero = accuracy(&out.stage2_network, &test, 64).unwrap();
    let forward = accuracy(&out.network, &test, 64).unwrap();
    let reversed = accuracy(&out.network, &test.reversed_units().unwrap(), 64).unwrap();
    verdict(
        (zero - 0.5).abs() <= 0.05 && forward >= 0.9 && reversed <= 0.1 + (1.0 - forward),
        format!(
            "{}/{} samples, zero-block {:.1}%, trained {:.1}%, reversed {:.1}%",
            train.len(),
            test.len(),
            100.0 * zero,
            100.0 * forward,
            100.0 * reversed
        ),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_v4d"))
        .args(args)
        .env_remove("V4D_THREADS")
        .output()
        .unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let base = [
        "train",
        "--epochs",
        "2",
        "--train-size",
        "32",
        "--test-size",
        "16",
        "--seed",
        "5",
    ];
    for run in ["a", "b"] {
        cli(&[&base[..], &["--out", &p(run)]].concat())?;
    }
    let read = |path: &Path| std::fs::read(path).unwrap();
    let metrics_same =
        read(&dir.path().join("a/metrics.jsonl")) == read(&dir.path().join("b/metrics.jsonl"));

    let video = Tensor::<f32>::from_fn(vec![3, 40, 20, 20], |i| {
        ((i[0] * 7 + i[1] * 3 + i[2] * 5 + i[3]) % 17) as f32 / 17.0
    });
    write_vt01(dir.path().join("video.vt01"), &video).unwrap();
    for (run, threads) in [("p1", "1"), ("p2", "2")] {
        cli(&[
            "--deterministic",
            "--threads",
            threads,
            "infer",
            "--checkpoint",
            &p("a/checkpoint"),
            "--input",
            &p("video.vt01"),
            "--crop-size",
            "16",
            "--frame-stride",
            "1",
            "--clip-len",
            "4",
            "--units-infer",
            "8",
            "--out",
            &p(run),
        ])?;
    }
    let infer_same = read(&dir.path().join("p1/prediction.json"))
        == read(&dir.path().join("p2/prediction.json"));
    verdict(
        metrics_same && infer_same,
        format!(
            "train metrics identical: {metrics_same}, deterministic infer identical: {infer_same}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("direct and decomposed 4D convolution agree", routes_agree),
        ("analytic gradients match finite differences", gradients),
        ("zero 4D blocks reduce to segment averaging", tsn_reduction),
        (
            "unit-only kernel equals dilated 3D convolution",
            dilated_reduction,
        ),
        ("parameter counts", param_counts),
        ("MAC ratio V4D / I3D", mac_ratio),
        ("backbone shape ladder", shape_ladder),
        ("combination counts", combination_counts),
        ("unit-order task", order_task),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{:>2}] {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
