use std::path::Path;
use std::process::{Command, Output};

use runet_core::cli::{EVAL_HEADER, EXIT_CONFIG, EXIT_RUNTIME};
use runet_core::data::image::read_image;
use runet_core::train::METRICS_HEADER;
use runet_core::{ModelConfig, RecurrentUNet};

const BIN: &str = env!("CARGO_BIN_EXE_runet");

fn runet(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .args(["--threads", "1"])
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra_train: &str) -> String {
    let text = format!(
        "[model]\nvariant = dru\nlevel = 4\niterations = 3\n\
         [train]\nepochs = 2\nbatch_size = 4\nalpha = 0.4\n{extra_train}\n\
         [data]\nsource = synth\ntask = blobs\ntrain_count = 8\nval_count = 4\nheight = 32\nwidth = 32\n\
         [output]\ndir = run\n"
    );
    let path = dir.join("run.ini");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("alpha = 0.4", "alpha = 0");
    std::fs::write(&cfg, text).unwrap();
    let out = runet(&["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.alpha"), "{err}");
    assert!(!dir.path().join("run").join("metrics.csv").exists());
}

#[test]
fn missing_config_and_bad_arguments_exit_with_config_code() {
    let out = runet(&["train"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = runet(&["--config", "/nonexistent/run.ini", "train"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = runet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn unreadable_image_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let model = RecurrentUNet::<f32>::new(ModelConfig::dru(4), 0).unwrap();
    runet_core::train::save_checkpoint(&ckpt, &model, None).unwrap();
    let bogus = dir.path().join("x.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    let out = runet(&[
        "--out",
        s(dir.path()),
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&bogus),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    // Two identical runs into separate folders give identical metrics.
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let log = ok(&runet(&["--config", &cfg, "--out", s(&a), "train"]));
    assert!(log.contains("368817 parameters"), "{log}");
    ok(&runet(&["--config", &cfg, "--out", s(&b), "train"]));
    let csv_a = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(csv_a.starts_with(METRICS_HEADER));
    assert_eq!(csv_a.lines().count(), 1 + 2 * 2 * 3);
    assert!(a.join("best.ckpt").exists() && a.join("last.ckpt").exists());
    let breakdown = std::fs::read_to_string(a.join("parameters.txt")).unwrap();
    assert!(breakdown.contains("368817"), "{breakdown}");

    // The snapshot alone reproduces the run.
    let snapshot = a.join("config.ini");
    let c = dir.path().join("c");
    ok(&runet(&["--config", s(&snapshot), "--out", s(&c), "train"]));
    assert_eq!(csv_a, std::fs::read_to_string(c.join("metrics.csv")).unwrap());

    // Evaluation is deterministic and honours the iteration override.
    let best = a.join("best.ckpt");
    let e1 = ok(&runet(&["--config", &cfg, "eval", "--checkpoint", s(&best)]));
    let e2 = ok(&runet(&["--config", &cfg, "eval", "--checkpoint", s(&best)]));
    assert_eq!(e1, e2);
    assert!(e1.starts_with(EVAL_HEADER));
    assert_eq!(e1.lines().count(), 1 + 3);
    let ev = dir.path().join("ev");
    let e5 = ok(&runet(&[
        "--config",
        &cfg,
        "--iterations",
        "5",
        "--out",
        s(&ev),
        "eval",
        "--checkpoint",
        s(&best),
    ]));
    assert_eq!(e5.lines().count(), 1 + 5);
    assert_eq!(std::fs::read_to_string(ev.join("eval.csv")).unwrap(), e5);
    // The first three steps do not depend on how many follow.
    assert_eq!(e5.lines().take(4).collect::<Vec<_>>(), e1.lines().collect::<Vec<_>>());

    // Prediction on a synthesized image writes one map and one mask per step.
    let ds = dir.path().join("ds");
    ok(&runet(&[
        "--out",
        s(&ds),
        "synth",
        "--task",
        "blobs",
        "--train",
        "0",
        "--val",
        "1",
        "--size",
        "48",
    ]));
    let image = ds.join("images").join("blobs_val_00000.ppm");
    let p = dir.path().join("p");
    ok(&runet(&[
        "--iterations",
        "4",
        "--out",
        s(&p),
        "predict",
        "--checkpoint",
        s(&best),
        "--image",
        s(&image),
    ]));
    for t in 1..=4 {
        let prob = read_image(&p.join(format!("prob_t{t}.pgm"))).unwrap();
        let mask = read_image(&p.join(format!("mask_t{t}.png"))).unwrap();
        assert_eq!(prob.shape(), &[1, 48, 48]);
        assert_eq!(mask.shape(), &[1, 48, 48]);
        for (&q, &m) in prob.data().iter().zip(mask.data()) {
            let byte = (q * 255.0).round();
            assert_eq!(m > 0.5, byte >= 128.0, "step {t}");
        }
    }
    assert!(!p.join("prob_t5.pgm").exists());
}

#[test]
fn bench_reports_model_size_and_consistent_fps() {
    let out = ok(&runet(&[
        "bench",
        "--height",
        "32",
        "--width",
        "48",
        "--repetitions",
        "2",
        "--warmup",
        "1",
    ]));
    let value = |key: &str| -> f64 {
        out.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap_or_else(|| panic!("no `{key}` in\n{out}"))
            .parse()
            .unwrap()
    };
    let expect = RecurrentUNet::<f32>::new(ModelConfig::dru(4), 0)
        .unwrap()
        .count_parameters();
    assert_eq!(value("parameters ") as usize, expect);
    let total = value("latency_total_ms");
    let fps = value("fps");
    assert!(
        (fps - 1000.0 / total).abs() <= 0.01 + 1e-3 * fps,
        "fps {fps}, total {total}"
    );
    let per = value("latency_per_iteration_ms");
    assert!((per * 3.0 - total).abs() < 0.01, "{per} * 3 vs {total}");
}
