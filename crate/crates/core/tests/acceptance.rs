//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Exits non-zero when any gated criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runet_core::cli::parameter_breakdown;
use runet_core::data::{compute_metrics, synth, Manifest, PatchGrid, Sample, Split, SynthTask};
use runet_core::gradcheck::suite::{run_suite, DEFAULT_SEEDS, MODEL_TOLERANCE, OP_TOLERANCE};
use runet_core::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use runet_core::train::{
    evaluate, iteration_weights, load_checkpoint, save_checkpoint, train, IterationMetrics, Tiling, TrainConfig,
};
use runet_core::{Error, ModelConfig, RecurrentUNet, Tape, Tensor, Variant};

// Pinned tolerances and budgets.
const GRADCHECK_TIME_LIMIT: Duration = Duration::from_secs(5 * 60);
const PARAM_BAND: (usize, usize) = (250_000, 450_000);
const METRIC_CASES: u64 = 100;
const METRIC_SIDE: usize = 32;
const CURVES_TRAIN: usize = 400;
const CURVES_VAL: usize = 100;
const CURVES_SIZE: usize = 64;
const CURVES_DATA_SEED: u64 = 1;
const CURVES_MODEL_SEED: u64 = 0;
const CURVES_EPOCHS: usize = 20;
const CURVES_ALPHA: f64 = 0.4;
const CURVES_BATCH: usize = 4;
const CURVES_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);
const CURVES_MIN_MIOU: f64 = 0.80;
const REFINEMENT_SLACK: f64 = 0.005;
const DRIVE_BUDGET_DEFAULT_MIN: u64 = 120;
const DRIVE_REFERENCE_MIOU: f64 = 0.821;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
    Reported(String),
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, title: &str, outcome: Outcome) {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
            Outcome::Reported(d) => ("REPORTED", d),
        };
        println!("[{tag}] {id}. {title}: {detail}");
    }
}

fn scratch_dir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn or_fail(r: Result<Outcome, Error>) -> Outcome {
    r.unwrap_or_else(|e| Outcome::Fail(format!("error: {e}")))
}

fn gradient_suite() -> Result<Outcome, Error> {
    let start = Instant::now();
    let cases = run_suite(DEFAULT_SEEDS)?;
    let elapsed = start.elapsed();
    let mut worst_op = 0.0f64;
    let mut failed = Vec::new();
    for c in &cases {
        println!(
            "    {:<28} checked {:>5}  max rel err {:.2e}  (tol {:.0e})",
            c.name, c.checked, c.max_rel_err, c.tolerance
        );
        if !c.passes() {
            failed.push(c.name.clone());
        }
        if c.tolerance == OP_TOLERANCE {
            worst_op = worst_op.max(c.max_rel_err);
        }
    }
    let model = cases.last().map_or(f64::NAN, |c| c.max_rel_err);
    let detail = format!(
        "{} cases x {} seeds, ops max {:.2e} < {:.0e}, model max {:.2e} < {:.0e}, {:.1}s (limit {}s){}",
        cases.len(),
        DEFAULT_SEEDS,
        worst_op,
        OP_TOLERANCE,
        model,
        MODEL_TOLERANCE,
        elapsed.as_secs_f64(),
        GRADCHECK_TIME_LIMIT.as_secs(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failing: {}", failed.join(", "))
        }
    );
    Ok(check(failed.is_empty() && elapsed < GRADCHECK_TIME_LIMIT, detail))
}

fn set(m: &mut RecurrentUNet<f64>, id: runet_core::nn::ParamId, v: f64) {
    m.params.value_mut(id).data_mut().fill(v);
}

fn unit_step(m: &RecurrentUNet<f64>, e: &Tensor<f64>, h: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>), Error> {
    let unit = m.gated_unit().expect("gated variant");
    let mut tape = Tape::new();
    let p = m.params.bind_frozen(&mut tape);
    let ev = tape.constant(e.clone());
    let hv = tape.constant(h.clone());
    let (d, hn) = unit.step(&mut tape, &p, ev, hv)?;
    Ok((tape.value(d).clone(), tape.value(hn).clone()))
}

fn exact_equalities() -> Result<Outcome, Error> {
    let w = iteration_weights(3, 0.4)?;
    let weights_ok = w == [0.16, 0.4, 1.0];

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = Tensor::rand_uniform(vec![2, 64, 4, 4], 0.0, 1.0, &mut rng);
    let h = Tensor::rand_uniform(vec![2, 128, 4, 4], -1.0, 1.0, &mut rng);

    // Reset gate saturated open: DRU and SRU with shared weights agree.
    let mut dru = RecurrentUNet::<f64>::new(ModelConfig::dru(4), 21)?;
    let mut sru = RecurrentUNet::<f64>::new(ModelConfig::sru(4), 99)?;
    let shift = dru.gated_unit().unwrap().reset_gate_shift().unwrap();
    set(&mut dru, shift, 1e4);
    sru.params.copy_matching(&dru.params)?;
    let (dd, dh) = unit_step(&dru, &e, &h)?;
    let (sd, sh) = unit_step(&sru, &e, &h)?;
    let x = Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let dp = dru.predict(&x, 3)?;
    let sp = sru.predict(&x, 3)?;
    let reset_ok = dd == sd && dh == sh && dp.iter().zip(&sp).all(|(a, b)| a.data() == b.data());

    // Update gate saturated at 1: the state is carried unchanged.
    let mut held = RecurrentUNet::<f64>::new(ModelConfig::dru(4), 5)?;
    let z = held.gated_unit().unwrap().update_gate_shift();
    set(&mut held, z, 1e4);
    let (_, hn) = unit_step(&held, &e, &h)?;
    let update_ok = hn.data() == h.data();

    Ok(check(
        weights_ok && reset_ok && update_ok,
        format!(
            "weights {:?} {}, r=1 DRU==SRU {}, z=1 keeps h {}",
            w,
            verdict(weights_ok),
            verdict(reset_ok),
            verdict(update_ok)
        ),
    ))
}

fn verdict(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISMATCH"
    }
}

fn parameter_budget() -> Result<Outcome, Error> {
    let m = RecurrentUNet::<f32>::new(ModelConfig::dru(4).with_image_channels(3), 0)?;
    let n = m.count_parameters();
    // Grouped by top-level module for the log; the full table is the
    // parameters.txt that `runet train` writes.
    let table = parameter_breakdown(&m);
    let mut groups: Vec<(String, usize)> = Vec::new();
    for line in table.lines().skip(1) {
        let mut cols = line.split('\t');
        let name = cols.next().unwrap_or_default();
        let count: usize = cols.nth(1).and_then(|c| c.parse().ok()).unwrap_or(0);
        let key = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some(g) => g.1 += count,
            None => groups.push((key, count)),
        }
    }
    for (k, c) in &groups {
        println!("    {k:<28} {c:>8}");
    }
    let summed: usize = groups.iter().map(|g| g.1).sum();
    Ok(check(
        (PARAM_BAND.0..=PARAM_BAND.1).contains(&n) && summed == n,
        format!(
            "DRU(4) has {n} parameters, band [{}, {}], breakdown sums to {summed}",
            PARAM_BAND.0, PARAM_BAND.1
        ),
    ))
}

fn metric_oracle() -> Result<Outcome, Error> {
    let n = METRIC_SIDE * METRIC_SIDE;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut mismatches = 0;
    for case in 0..METRIC_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let density = rng.random_range(0.05..0.6);
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect();
        let gt: Vec<f32> = (0..n).map(|_| rng.random_bool(density) as u8 as f32).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..METRIC_SIDE {
            for x in 0..METRIC_SIDE {
                let i = y * METRIC_SIDE + x;
                match (prob[i] as f64 >= 0.5, gt[i] == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let r = compute_metrics(&prob, &gt, 0.5)?;
        let fg = ratio(tp, tp + fp + fn_);
        let bg = ratio(tn, tn + fn_ + fp);
        let mrec = 0.5 * (ratio(tp, tp + fn_) + ratio(tn, tn + fp));
        let mprec = 0.5 * (ratio(tp, tp + fp) + ratio(tn, tn + fn_));
        let same = (r.confusion.tp, r.confusion.fp, r.confusion.fn_, r.confusion.tn) == (tp, fp, fn_, tn)
            && r.fg_iou == fg
            && r.miou == 0.5 * (fg + bg)
            && r.mrec == mrec
            && r.mprec == mprec;
        if !same {
            mismatches += 1;
        }
    }
    let mut prob = vec![0.0f32; 16];
    let mut gt = vec![0.0f32; 16];
    for i in [0, 1, 4, 5] {
        prob[i] = 0.9;
    }
    for i in [1, 2, 5, 6] {
        gt[i] = 1.0;
    }
    let hand = compute_metrics(&prob, &gt, 0.5)?.fg_iou;
    Ok(check(
        mismatches == 0 && hand == 2.0 / 6.0,
        format!("{METRIC_CASES} random {METRIC_SIDE}x{METRIC_SIDE} cases, {mismatches} mismatches; hand example IoU {hand:.6} (expect 2/6)"),
    ))
}

fn fit(cfg: ModelConfig, tr: &[Sample], va: &[Sample]) -> Result<(Vec<IterationMetrics>, Duration), Error> {
    let mut model = RecurrentUNet::<f32>::new(cfg, CURVES_MODEL_SEED)?;
    let tc = TrainConfig {
        epochs: CURVES_EPOCHS,
        batch_size: CURVES_BATCH,
        alpha: CURVES_ALPHA,
        ..Default::default()
    };
    let start = Instant::now();
    let out = train(&mut model, tr, va, &tc, None, &mut |s| {
        if s.epoch % 5 == 0 {
            let v: Vec<String> = s.val.iter().map(|m| format!("{:.4}", m.report.miou)).collect();
            println!(
                "    {} epoch {:>2} loss {:.4} val mIoU [{}]",
                model_name(&s.val),
                s.epoch,
                s.train_loss,
                v.join(", ")
            );
        }
    })?;
    let last = out.epochs.last().expect("at least one epoch").val.clone();
    Ok((last, start.elapsed()))
}

fn model_name(val: &[IterationMetrics]) -> &'static str {
    if val.len() > 1 {
        "DRU(4)"
    } else {
        "U-Net "
    }
}

fn curves_learning() -> Result<Outcome, Error> {
    let tr = synth::generate(
        SynthTask::Curves,
        CURVES_DATA_SEED,
        Split::Train,
        CURVES_TRAIN,
        CURVES_SIZE,
        CURVES_SIZE,
        3,
    )?;
    let va = synth::generate(
        SynthTask::Curves,
        CURVES_DATA_SEED,
        Split::Val,
        CURVES_VAL,
        CURVES_SIZE,
        CURVES_SIZE,
        3,
    )?;
    let (dru, t_dru) = fit(ModelConfig::dru(4).with_iterations(3), &tr, &va)?;
    let (unet, t_unet) = fit(ModelConfig::new(Variant::UNet), &tr, &va)?;
    let d1 = dru[0].report.miou;
    let d3 = dru[dru.len() - 1].report.miou;
    let u = unet[unet.len() - 1].report.miou;
    let total = t_dru + t_unet;
    let a = d3 >= CURVES_MIN_MIOU;
    let b = d3 >= u;
    let c = d3 >= d1 - REFINEMENT_SLACK;
    let time_ok = total <= CURVES_TIME_LIMIT;
    Ok(check(
        a && b && c && time_ok,
        format!(
            "(a) DRU(4) t3 mIoU {d3:.4} >= {CURVES_MIN_MIOU} {}; (b) vs U-Net {u:.4} {}; (c) t1 {d1:.4} -> t3 {d3:.4} {}; \
             {CURVES_EPOCHS} epochs each, {:.1} CPU-min total (limit {})",
            verdict(a),
            verdict(b),
            verdict(c),
            total.as_secs_f64() / 60.0,
            CURVES_TIME_LIMIT.as_secs() / 60
        ),
    ))
}

/// Trains for a wall-clock budget by resuming one epoch at a time.
fn fit_for(cfg: ModelConfig, tr: &[Sample], va: &[Sample], dir: &Path, budget: Duration) -> Result<f64, Error> {
    let start = Instant::now();
    let mut epochs = 0;
    let mut tc = TrainConfig {
        eval_tiling: Some(Tiling { patch: 128, stride: 64 }),
        resume: true,
        ..Default::default()
    };
    let mut best = 0.0;
    while start.elapsed() < budget {
        epochs += 1;
        tc.epochs = epochs;
        let mut model = RecurrentUNet::<f32>::new(cfg.clone(), 0)?;
        best = train(&mut model, tr, va, &tc, Some(dir), &mut |_| {})?.best_val_miou;
    }
    Ok(best)
}

fn drive_spot_check(root: PathBuf) -> Result<Outcome, Error> {
    let budget = Duration::from_secs(
        60 * std::env::var("RUNET_DRIVE_MINUTES")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DRIVE_BUDGET_DEFAULT_MIN),
    );
    let manifest = Manifest::from_file(&root.join("manifest.tsv"))?;
    let full = manifest.load(Split::Train, 3)?;
    let va = manifest.load(Split::Val, 3)?;
    let mut tr = Vec::new();
    for s in &full {
        tr.extend(s.patches(&PatchGrid::new(s.height(), s.width(), 128, 64)?)?);
    }
    let scratch = scratch_dir();
    let dru = fit_for(ModelConfig::dru(4), &tr, &va, &scratch.path().join("dru"), budget)?;
    let unet = fit_for(
        ModelConfig::new(Variant::UNet),
        &tr,
        &va,
        &scratch.path().join("unet"),
        budget,
    )?;
    let detail = format!(
        "DRU(4) mIoU {dru:.4} (published {DRIVE_REFERENCE_MIOU}), U-Net {unet:.4}, {} min each",
        budget.as_secs() / 60
    );
    Ok(if dru >= unet {
        Outcome::Reported(detail + ", ordering holds")
    } else {
        Outcome::Fail(detail)
    })
}

fn checkpoint_round_trip() -> Result<Outcome, Error> {
    let dir = scratch_dir();
    let path = dir.path().join("m.ckpt");
    let mut model = RecurrentUNet::<f32>::new(ModelConfig::dru(4), 17)?;
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v *= 1.01;
        }
    }
    save_checkpoint(&path, &model, None)?;
    let loaded = load_checkpoint::<f32>(&path)?.model()?;
    let x = Tensor::rand_uniform(vec![1, 3, 48, 48], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let bits = |m: &RecurrentUNet<f32>| -> Result<Vec<u32>, Error> {
        Ok(m.predict(&x, 3)?
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect())
    };
    let bitwise = bits(&model)? == bits(&loaded)?;

    let bytes = encode_checkpoint(&model, None);
    let mut flipped = bytes.clone();
    let k = flipped.len() - 64;
    flipped[k] ^= 1;
    let truncated_rejected = matches!(
        decode_checkpoint::<f32>(&bytes[..bytes.len() - 9]),
        Err(Error::Corrupt(_))
    );
    let flip_rejected = matches!(decode_checkpoint::<f32>(&flipped), Err(Error::Corrupt(_)));
    let ck = decode_checkpoint::<f32>(&bytes)?;
    let mut other = RecurrentUNet::<f32>::new(ModelConfig::sru(4), 0)?;
    let mismatch_rejected = matches!(ck.restore_params(&mut other.params), Err(Error::ParamMismatch { .. }));
    Ok(check(
        bitwise && truncated_rejected && flip_rejected && mismatch_rejected,
        format!(
            "forward bitwise {}, truncated {}, bit flip {}, mismatched config {}",
            verdict(bitwise),
            if truncated_rejected { "rejected" } else { "ACCEPTED" },
            if flip_rejected { "rejected" } else { "ACCEPTED" },
            if mismatch_rejected { "rejected" } else { "ACCEPTED" }
        ),
    ))
}

fn determinism() -> Result<Outcome, Error> {
    let tr = synth::generate(SynthTask::Blobs, 4, Split::Train, 8, 32, 32, 3)?;
    let va = synth::generate(SynthTask::Blobs, 4, Split::Val, 4, 32, 32, 3)?;
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        augment_flip: true,
        ..Default::default()
    };
    let run = || -> Result<(String, Vec<IterationMetrics>, Vec<IterationMetrics>), Error> {
        let dir = scratch_dir();
        let mut m = RecurrentUNet::<f32>::new(ModelConfig::dru(4), 8)?;
        train(&mut m, &tr, &va, &tc, Some(dir.path()), &mut |_| {})?;
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).expect("metrics.csv written");
        let best = load_checkpoint::<f32>(&dir.path().join("best.ckpt"))?.model()?;
        let e1 = evaluate(&best, &va, 3, None)?;
        let e2 = evaluate(&best, &va, 3, None)?;
        Ok((csv, e1, e2))
    };
    let (csv_a, e1, e2) = run()?;
    let (csv_b, ..) = run()?;
    let train_same = csv_a == csv_b;
    let eval_same = e1 == e2;
    Ok(check(
        train_same && eval_same,
        format!(
            "metrics.csv identical {}, eval outputs identical {}",
            verdict(train_same),
            verdict(eval_same)
        ),
    ))
}

fn main() {
    // `cargo test -- --list` and filters are passed through; this target has
    // a single implicit test.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut report = Report { failures: 0 };
    let start = Instant::now();
    println!("acceptance criteria");
    report.line(1, "gradient suite", or_fail(gradient_suite()));
    report.line(2, "exact equalities", or_fail(exact_equalities()));
    report.line(3, "parameter budget", or_fail(parameter_budget()));
    report.line(4, "metric oracle", or_fail(metric_oracle()));
    report.line(5, "curves learning", or_fail(curves_learning()));
    match std::env::var_os("RUNET_DRIVE_DIR") {
        Some(dir) => report.line(6, "DRIVE spot-check", or_fail(drive_spot_check(dir.into()))),
        None => report.line(
            6,
            "DRIVE spot-check",
            Outcome::NotRun("set RUNET_DRIVE_DIR to a dataset folder with manifest.tsv".into()),
        ),
    }
    report.line(7, "checkpoint round-trip", or_fail(checkpoint_round_trip()));
    report.line(8, "determinism", or_fail(determinism()));
    println!(
        "{} failing, {:.1} min total",
        report.failures,
        start.elapsed().as_secs_f64() / 60.0
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
