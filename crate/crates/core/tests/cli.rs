use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use v4d::network::Network;
use v4d::tensor::{write_vt01, Tensor};
use v4d::training::{order_task_network, save_checkpoint, OrderTaskSpec};

fn v4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v4d"))
        .args(args)
        .env_remove("V4D_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = v4d(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    v4d(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Zero-block order-task network checkpoint plus a `(3, 40, 20, 20)` video.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let net = Network::<f32>::build(&order_task_network(&OrderTaskSpec::default())).unwrap();
    let ckpt = dir.join("ckpt");
    save_checkpoint(&ckpt, &net, None).unwrap();
    let video = Tensor::<f32>::from_fn(vec![3, 40, 20, 20], |i| {
        (((i[0] * 7 + i[1] * 3 + i[2] * 5 + i[3] * 11) % 17) as f32) / 17.0
    });
    let path = dir.join("video.vt01");
    write_vt01(&path, &video).unwrap();
    (ckpt, path)
}

fn infer_args<'a>(ckpt: &'a Path, video: &'a Path) -> Vec<&'a str> {
    vec![
        "infer",
        "--checkpoint",
        s(ckpt),
        "--input",
        s(video),
        "--crop-size",
        "16",
        "--frames-per-unit",
        "4",
        "--frame-stride",
        "1",
        "--clip-len",
        "4",
    ]
}

#[test]
fn infer_counts_combinations_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let out = dir.path().join("pred");
    let mut args = infer_args(&ckpt, &video);
    args.extend(["--units-infer", "8", "--out", s(&out)]);
    ok(&args);
    let p = json(&out.join("prediction.json"));
    assert_eq!(p["schema"], "v4d.prediction/1");
    assert_eq!(p["combinations_used"], 16);
    assert_eq!(p["crops_used"], 3);
    let total: f64 = p["class_probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(p["timing"]["seconds"].as_f64().is_some());
    assert_eq!(json(&out.join("config.json"))["command"], "infer");
}

#[test]
fn zero_block_infer_matches_tsn_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let run = |extra: &[&str]| -> Value {
        let mut args = infer_args(&ckpt, &video);
        args.extend(["--units-infer", "8", "--deterministic"]);
        args.extend(extra);
        serde_json::from_str(&ok(&args)).unwrap()
    };
    let v4d_pred = run(&[]);
    let tsn = run(&["--tsn-baseline"]);
    assert_eq!(v4d_pred["method"], "v4d");
    assert_eq!(tsn["method"], "tsn");
    let a = v4d_pred["class_probs"].as_array().unwrap();
    let b = tsn["class_probs"].as_array().unwrap();
    for (x, y) in a.iter().zip(b) {
        assert!(
            (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-6,
            "{a:?} vs {b:?}"
        );
    }
    assert_eq!(v4d_pred["top5"][0]["class"], tsn["top5"][0]["class"]);
}

#[test]
fn deterministic_infer_is_byte_identical_and_untimed() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut args = infer_args(&ckpt, &video);
        args.extend(["--deterministic", "--threads", threads, "--out", s(&out)]);
        ok(&args);
        outputs.push(fs::read(out.join("prediction.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!String::from_utf8_lossy(&outputs[0]).contains("timing"));
}

#[test]
fn infer_reruns_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let first = dir.path().join("first");
    let mut args = infer_args(&ckpt, &video);
    args.extend(["--crops", "1", "--deterministic", "--out", s(&first)]);
    ok(&args);
    let second = dir.path().join("second");
    ok(&[
        "infer",
        "--deterministic",
        "--config",
        s(&first.join("config.json")),
        "--out",
        s(&second),
    ]);
    assert_eq!(
        fs::read(first.join("prediction.json")).unwrap(),
        fs::read(second.join("prediction.json")).unwrap()
    );
    assert_eq!(json(&second.join("prediction.json"))["crops_used"], 1);
}

#[test]
fn train_is_reproducible_and_reruns_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "train",
        "--task",
        "order",
        "--epochs",
        "2",
        "--train-size",
        "32",
        "--test-size",
        "16",
        "--seed",
        "4",
    ];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[&base[..], &["--out", s(&a)]].concat());
    ok(&[&base[..], &["--out", s(&b)]].concat());
    let metrics = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 2);

    let c = dir.path().join("c");
    ok(&[
        "train",
        "--config",
        s(&a.join("config.json")),
        "--out",
        s(&c),
    ]);
    assert_eq!(metrics, fs::read(c.join("metrics.jsonl")).unwrap());
    let summary = json(&a.join("summary.json"));
    assert!(summary["eval_acc"].as_f64().is_some());
    assert!(a.join("checkpoint/manifest.json").exists());
}

#[test]
fn zero_learning_rate_gives_flat_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flat");
    ok(&[
        "train",
        "--lr",
        "0",
        "--epochs",
        "3",
        "--train-size",
        "16",
        "--test-size",
        "8",
        "--out",
        s(&out),
    ]);
    let losses: Vec<f64> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["loss"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 3);
    // Batch norm still uses batch statistics, so only the visiting order varies.
    assert!(
        losses.iter().all(|l| (l - losses[0]).abs() < 1e-3),
        "{losses:?}"
    );
}

#[test]
fn trained_checkpoint_feeds_inference_on_saved_clips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&[
        "train",
        "--epochs",
        "1",
        "--train-size",
        "16",
        "--test-size",
        "8",
        "--out",
        s(&out),
    ]);
    let clips = Tensor::<f32>::from_fn(vec![3, 4, 4, 16, 16], |i| (i[1] * 16 + i[3]) as f32 / 64.0);
    let path = dir.path().join("clips.vt01");
    write_vt01(&path, &clips).unwrap();
    let pred: Value = serde_json::from_str(&ok(&[
        "infer",
        "--deterministic",
        "--checkpoint",
        s(&out.join("checkpoint")),
        "--input",
        s(&path),
    ]))
    .unwrap();
    assert_eq!(pred["combinations_used"], 1);
    assert_eq!(pred["crops_used"], 1);
}

#[test]
fn report_counts_the_v4d_resnet18() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    ok(&[
        "report",
        "--preset",
        "v4d-r18",
        "--classes",
        "200",
        "--out",
        s(&out),
    ]);
    let r = json(&out.join("report.json"));
    let params = r["total_params"].as_f64().unwrap();
    assert!((params / 33.1e6 - 1.0).abs() < 0.03, "{params}");
    assert_eq!(
        r["total_flops"].as_u64().unwrap(),
        2 * r["total_macs"].as_u64().unwrap()
    );
    let head = r["layers"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(head["output_shape"], serde_json::json!([1, 200]));
}

#[test]
fn equiv_and_gradcheck_commands_pass() {
    let out = ok(&["equiv", "--cases", "9"]);
    let line = out
        .lines()
        .find(|l| l.starts_with("max |direct - decomposed| (f64)"))
        .unwrap();
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value < 1e-10);
    let dir = tempfile::tempdir().unwrap();
    ok(&["gradcheck", "--out", s(dir.path())]);
    let report = json(&dir.path().join("gradcheck.json"));
    assert!(report["entries"].as_array().unwrap().len() > 20);
}

#[test]
fn cam_writes_schema_tagged_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let out = dir.path().join("cam");
    ok(&[
        "cam",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&video),
        "--crop-size",
        "16",
        "--frames-per-unit",
        "4",
        "--frame-stride",
        "1",
        "--clip-len",
        "4",
        "--class",
        "1",
        "--png",
        "--out",
        s(&out),
    ]);
    let report = json(&out.join("cam.json"));
    assert_eq!(report["class_id"], 1);
    let csv = fs::read_to_string(out.join("cam_u0_raw.csv")).unwrap();
    assert!(csv.starts_with("# schema=v4d.cam/1"));
    assert!(out.join("cam_u3_t0.png").exists());
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, video) = fixture(dir.path());
    let d = s(dir.path());

    // Configuration problems.
    assert_eq!(code(&["train", "--task", "imagenet", "--out", d]), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"command\": \"train\", \"bogus\": 1}").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 2);
    assert_eq!(
        code(&[
            "infer",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&video),
            "--crops",
            "2"
        ]),
        2
    );
    assert_eq!(code(&["report", "--preset", "v4d-r34"]), 2);
    assert_eq!(code(&["not-a-command"]), 2);

    // Model and shape mismatches.
    let gray = dir.path().join("gray.vt01");
    write_vt01(&gray, &Tensor::<f32>::zeros(vec![1, 4, 4, 16, 16])).unwrap();
    assert_eq!(
        code(&["infer", "--checkpoint", s(&ckpt), "--input", s(&gray)]),
        3
    );
    let manifest = ckpt.join("manifest.json");
    let mut m = json(&manifest);
    m["spec"]["width"] = 16.into();
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    for f in fs::read_dir(&ckpt).unwrap() {
        let f = f.unwrap();
        fs::copy(f.path(), other.join(f.file_name())).unwrap();
    }
    fs::write(
        other.join("manifest.json"),
        serde_json::to_string(&m).unwrap(),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "infer",
            "--checkpoint",
            s(&other),
            "--input",
            s(&video),
            "--crop-size",
            "16"
        ]),
        3
    );

    // Missing files.
    assert_eq!(
        code(&[
            "infer",
            "--checkpoint",
            s(&dir.path().join("none")),
            "--input",
            s(&video)
        ]),
        4
    );
    assert_eq!(
        code(&[
            "infer",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&dir.path().join("none.vt01"))
        ]),
        4
    );

    // Divergence.
    let out = dir.path().join("diverge");
    let args = [
        "train",
        "--lr",
        "1e30",
        "--epochs",
        "2",
        "--train-size",
        "16",
        "--test-size",
        "8",
        "--out",
        s(&out),
    ];
    assert_eq!(code(&args), 5);
}

#[test]
fn thread_override_must_be_numeric() {
    let out = Command::new(env!("CARGO_BIN_EXE_v4d"))
        .args(["equiv", "--cases", "3"])
        .env("V4D_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
