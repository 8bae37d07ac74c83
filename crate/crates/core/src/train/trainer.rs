//! The training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{load_checkpoint, save_checkpoint, TrainingState};
use super::eval::{evaluate, IterationMetrics, Tiling};
use super::{iteration_weights, recurrent_loss};
use crate::autodiff::Tape;
use crate::data::metrics::{MetricsAccumulator, MetricsReport, DEFAULT_THRESHOLD};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ini::Section;
use crate::recurrent::{foreground_probability, RecurrentUNet};
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,iteration,miou,mrec,mprec,f1,loss";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `f32` or `f64`.
    pub precision: String,
    pub augment_flip: bool,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Continue from `last.ckpt` in the output directory when present.
    pub resume: bool,
    /// Sliding-window settings for validation; not part of the config file
    /// section (set from the data section).
    pub eval_tiling: Option<Tiling>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            alpha: 1.0,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            precision: "f32".into(),
            augment_flip: false,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            resume: false,
            eval_tiling: None,
        }
    }
}

const KEYS: [&str; 13] = [
    "alpha",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "seed",
    "precision",
    "augment_flip",
    "lr_decay_every",
    "lr_decay_factor",
    "resume",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        iteration_weights(1, self.alpha)?;
        let checks: [(&str, bool, &str); 7] = [
            (
                "train.learning_rate",
                self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
                "must be finite and non-negative",
            ),
            ("train.beta1", (0.0..1.0).contains(&self.beta1), "must lie in [0, 1)"),
            ("train.beta2", (0.0..1.0).contains(&self.beta2), "must lie in [0, 1)"),
            ("train.adam_eps", self.adam_eps > 0.0, "must be positive"),
            ("train.batch_size", self.batch_size > 0, "must be positive"),
            (
                "train.precision",
                matches!(self.precision.as_str(), "f32" | "f64"),
                "must be f32 or f64",
            ),
            (
                "train.lr_decay_factor",
                self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0,
                "must lie in (0, 1]",
            ),
        ];
        for (field, ok, msg) in checks {
            if !ok {
                return Err(Error::config(field, msg));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("train");
        s.set("alpha", self.alpha);
        s.set("learning_rate", self.learning_rate);
        s.set("beta1", self.beta1);
        s.set("beta2", self.beta2);
        s.set("adam_eps", self.adam_eps);
        s.set("batch_size", self.batch_size);
        s.set("epochs", self.epochs);
        s.set("seed", self.seed);
        s.set("precision", &self.precision);
        s.set("augment_flip", self.augment_flip);
        s.set("lr_decay_every", self.lr_decay_every);
        s.set("lr_decay_factor", self.lr_decay_factor);
        s.set("resume", self.resume);
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        s.check_keys(&KEYS)?;
        let mut c = TrainConfig::default();
        macro_rules! num {
            ($($key:ident),*) => {
                $(if let Some(v) = s.parse(stringify!($key))? { c.$key = v; })*
            };
        }
        num!(
            alpha,
            learning_rate,
            beta1,
            beta2,
            adam_eps,
            batch_size,
            epochs,
            seed,
            lr_decay_every,
            lr_decay_factor
        );
        if let Some(v) = s.get("precision") {
            c.precision = v.to_string();
        }
        if let Some(v) = s.parse_bool("augment_flip")? {
            c.augment_flip = v;
        }
        if let Some(v) = s.parse_bool("resume")? {
            c.resume = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.learning_rate
        } else {
            let k = ((epoch - 1) / self.lr_decay_every) as i32;
            self.learning_rate * self.lr_decay_factor.powi(k)
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean weighted training loss over batches.
    pub train_loss: f64,
    pub train: Vec<IterationMetrics>,
    pub val: Vec<IterationMetrics>,
    pub seconds: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub epochs: Vec<EpochSummary>,
}

fn csv_row(epoch: usize, split: &str, m: &IterationMetrics) -> String {
    let r: &MetricsReport = &m.report;
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        epoch, split, m.iteration, r.miou, r.mrec, r.mprec, r.f1, m.loss
    )
}

fn batch_tensors<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let imgs: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let masks: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.cast()).collect();
    Ok((
        Tensor::stack(&imgs.iter().collect::<Vec<_>>())?,
        Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
    ))
}

/// Trains `model` in place.
///
/// With an output directory, writes `metrics.csv` (one row per split and
/// recurrence step per epoch), `last.ckpt` after every epoch and
/// `best.ckpt` whenever the final-step validation mIoU improves.
pub fn train<T: Real>(
    model: &mut RecurrentUNet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("data", "training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("data", "validation split is empty"));
    }
    if let Some(s) = train_set.iter().find(|s| s.image.shape() != train_set[0].image.shape()) {
        return Err(Error::Dataset(format!(
            "training samples must share one size; `{}` is {:?}, `{}` is {:?} (use patches)",
            train_set[0].id,
            train_set[0].image.shape(),
            s.id,
            s.image.shape()
        )));
    }
    let n_iter = model.config.iterations;
    let weights = iteration_weights(n_iter, cfg.alpha)?;
    let mut opt = Adam::new(cfg.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start_epoch = 1;
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    let paths = out_dir.map(|d| {
        let [csv, best, last] = output_paths(d);
        (csv, best, last)
    });
    let mut csv: Option<BufWriter<File>> = None;
    if let (Some(dir), Some((csv_path, _, last_path))) = (out_dir, &paths) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resuming = cfg.resume && last_path.exists();
        if resuming {
            let ck = load_checkpoint::<T>(last_path)?;
            if ck.config != model.config {
                return Err(Error::config(
                    "train.resume",
                    format!("{} was written for a different model", last_path.display()),
                ));
            }
            ck.restore_params(&mut model.params)?;
            ck.restore_optimizer(&mut opt, &model.params)?;
            rng = ck.rng.clone();
            start_epoch = ck.epoch as usize + 1;
            best = ck.best_metric;
            best_epoch = ck.epoch as usize;
        }
        let file = if resuming && csv_path.exists() {
            OpenOptions::new()
                .append(true)
                .open(csv_path)
                .map_err(|e| Error::io(csv_path, e))?
        } else {
            let mut f = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(csv_path, e))?;
            f
        };
        csv = Some(BufWriter::new(file));
    }

    let k = model.config.n_classes;
    let mut history = Vec::new();
    for epoch in start_epoch..=cfg.epochs {
        let started = Instant::now();
        opt.config.learning_rate = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut accs = vec![MetricsAccumulator::new(DEFAULT_THRESHOLD); n_iter];
        let mut step_loss = vec![0.0f64; n_iter];
        let mut total_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let flipped: Vec<Sample>;
            let chosen: Vec<&Sample> = if cfg.augment_flip {
                flipped = idx
                    .iter()
                    .map(|&i| {
                        if rng.random_bool(0.5) {
                            train_set[i].flipped()
                        } else {
                            train_set[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                idx.iter().map(|&i| &train_set[i]).collect()
            };
            let (x, y) = batch_tensors::<T>(&chosen)?;

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let xv = tape.constant(x);
            let logits = model.forward(&mut tape, &bound, xv, n_iter)?;
            let (loss, parts) = recurrent_loss(&mut tape, &logits, &y, &weights)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let batch_weight = chosen.len() as f64;
            total_loss += lv * batch_weight;
            let mask_data: Vec<f32> = y.data().iter().map(|v| v.as_f64() as f32).collect();
            for t in 0..n_iter {
                step_loss[t] += tape.value(parts[t]).data()[0].as_f64() * batch_weight;
                let p = foreground_probability(tape.value(logits[t]), k)?;
                let pf: Vec<f32> = p.data().iter().map(|v| v.as_f64() as f32).collect();
                accs[t].add(&pf, &mask_data)?;
            }
            let mut grads = tape.backward(loss)?;
            model.params.accumulate(&bound, &mut grads)?;
            opt.step(&mut model.params)?;
            model.params.zero_grad();
        }
        let n = train_set.len() as f64;
        let train_metrics: Vec<IterationMetrics> = accs
            .iter()
            .enumerate()
            .map(|(t, a)| IterationMetrics {
                iteration: t + 1,
                report: a.report(),
                loss: step_loss[t] / n,
            })
            .collect();
        let val_metrics = evaluate(model, val_set, n_iter, cfg.eval_tiling)?;
        let final_miou = val_metrics.last().expect("n_iter >= 1").report.miou;
        let improved = final_miou > best;
        if improved {
            best = final_miou;
            best_epoch = epoch;
        }

        if let (Some(w), Some((csv_path, best_path, last_path))) = (csv.as_mut(), &paths) {
            let mut rows = String::new();
            for m in &train_metrics {
                rows.push_str(&csv_row(epoch, "train", m));
            }
            for m in &val_metrics {
                rows.push_str(&csv_row(epoch, "val", m));
            }
            w.write_all(rows.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(csv_path, e))?;
            let state = TrainingState {
                epoch: epoch as u64,
                best_metric: best,
                rng: &rng,
                optimizer: Some(&opt),
            };
            if improved {
                save_checkpoint(best_path, model, Some(&state))?;
            }
            save_checkpoint(last_path, model, Some(&state))?;
        }

        let summary = EpochSummary {
            epoch,
            train_loss: total_loss / n,
            train: train_metrics,
            val: val_metrics,
            seconds: started.elapsed().as_secs_f64(),
            improved,
        };
        progress(&summary);
        history.push(summary);
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_miou: best,
        epochs: history,
    })
}

/// Paths written by [`train`] inside `out_dir`.
pub fn output_paths(out_dir: &Path) -> [PathBuf; 3] {
    [
        out_dir.join("metrics.csv"),
        out_dir.join("best.ckpt"),
        out_dir.join("last.ckpt"),
    ]
}
