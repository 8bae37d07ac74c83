//! The `runet` command line: config loading, the six verbs and exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::data::image::{adapt_channels, quantize, read_image, write_gray, write_mask};
use crate::data::{synth, write_dataset, Manifest, PatchGrid, Sample, Split, SynthTask};
use crate::error::{Error, Result};
use crate::gradcheck::suite;
use crate::ini::{Ini, Section};
use crate::recurrent::{foreground_probability, ModelConfig, RecurrentUNet, Variant};
use crate::tensor::{Real, Tensor};
use crate::train::{
    evaluate, load_checkpoint, predict_image, train, EpochSummary, IterationMetrics, Tiling, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const EVAL_HEADER: &str = "iteration,miou,mrec,mprec,f1,fg_iou,pr_break_even,loss";

#[derive(Parser, Debug)]
#[command(name = "runet", version, about = "Recurrent U-Net segmentation engine")]
pub struct Cli {
    /// INI file with [model], [train], [data] and [output] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides train.seed (and the synthetic data seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of recurrence steps (overrides model.iterations).
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct TileArgs {
    /// Tile inference into square patches of this size (multiple of 16).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Stride between tiles; defaults to half the patch size.
    #[arg(long)]
    pub patch_stride: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a config file.
    Train,
    /// Evaluate a checkpoint on a dataset split, per recurrence step.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to read; defaults to the [data] section of --config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[command(flatten)]
        tile: TileArgs,
    },
    /// Segment one image and write per-step masks and probability maps.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        tile: TileArgs,
    },
    /// Time forward passes.
    Bench {
        /// Model to time; without it the [model] section of --config (or a
        /// default DRU(4)) is built with random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 230)]
        height: usize,
        #[arg(long, default_value_t = 306)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Write a synthetic dataset (images, masks, manifest) to --out.
    Synth {
        #[arg(long, default_value = "curves")]
        task: SynthTask,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = suite::DEFAULT_SEEDS)]
        seeds: u64,
    },
}

/// Where training and validation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth {
        task: SynthTask,
        seed: u64,
        train: usize,
        val: usize,
        test: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// 0 trains on whole images.
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth {
                task: SynthTask::Curves,
                seed: 0,
                train: 400,
                val: 100,
                test: 0,
                height: 64,
                width: 64,
            },
            patch_size: 0,
            patch_stride: 0,
        }
    }
}

const DATA_KEYS: [&str; 11] = [
    "source",
    "manifest",
    "task",
    "seed",
    "train_count",
    "val_count",
    "test_count",
    "height",
    "width",
    "patch_size",
    "patch_stride",
];

impl DataConfig {
    /// `base` resolves a relative manifest path (the config file's folder).
    pub fn from_section(s: &Section, base: &Path) -> Result<Self> {
        s.check_keys(&DATA_KEYS)?;
        let source = match s.get("source").unwrap_or("synth") {
            "manifest" => {
                let Some(m) = s.get("manifest") else {
                    return Err(Error::config("data.manifest", "required when source = manifest"));
                };
                let p = PathBuf::from(m);
                DataSource::Manifest(if p.is_absolute() { p } else { base.join(p) })
            }
            "synth" => {
                let d = DataConfig::default();
                let DataSource::Synth {
                    task,
                    seed,
                    train,
                    val,
                    test,
                    height,
                    width,
                } = d.source
                else {
                    unreachable!()
                };
                DataSource::Synth {
                    task: s.parse("task")?.unwrap_or(task),
                    seed: s.parse("seed")?.unwrap_or(seed),
                    train: s.parse("train_count")?.unwrap_or(train),
                    val: s.parse("val_count")?.unwrap_or(val),
                    test: s.parse("test_count")?.unwrap_or(test),
                    height: s.parse("height")?.unwrap_or(height),
                    width: s.parse("width")?.unwrap_or(width),
                }
            }
            other => {
                return Err(Error::config(
                    "data.source",
                    format!("expected `synth` or `manifest`, got `{}`", other),
                ))
            }
        };
        let patch_size: usize = s.parse("patch_size")?.unwrap_or(0);
        let patch_stride: usize = s.parse("patch_stride")?.unwrap_or(patch_size / 2);
        let c = DataConfig {
            source,
            patch_size,
            patch_stride,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size > 0 {
            PatchGrid::new(self.patch_size, self.patch_size, self.patch_size, self.patch_stride)
                .map_err(|e| Error::config("data.patch_size", e.to_string()))?;
        }
        if let DataSource::Synth { height, width, .. } = self.source {
            if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
                return Err(Error::config(
                    "data.height",
                    format!("synthetic images must be multiples of 16, got {}x{}", height, width),
                ));
            }
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("data");
        match &self.source {
            DataSource::Manifest(p) => {
                s.set("source", "manifest");
                s.set("manifest", p.display());
            }
            DataSource::Synth {
                task,
                seed,
                train,
                val,
                test,
                height,
                width,
            } => {
                s.set("source", "synth");
                s.set("task", task);
                s.set("seed", seed);
                s.set("train_count", train);
                s.set("val_count", val);
                s.set("test_count", test);
                s.set("height", height);
                s.set("width", width);
            }
        }
        s.set("patch_size", self.patch_size);
        s.set("patch_stride", self.patch_stride);
        s
    }

    pub fn tiling(&self) -> Option<Tiling> {
        (self.patch_size > 0).then_some(Tiling {
            patch: self.patch_size,
            stride: self.patch_stride,
        })
    }

    pub fn load(&self, split: Split, channels: usize) -> Result<Vec<Sample>> {
        match &self.source {
            DataSource::Manifest(p) => Manifest::from_file(p)?.load(split, channels),
            DataSource::Synth {
                task,
                seed,
                train,
                val,
                test,
                height,
                width,
            } => {
                let n = match split {
                    Split::Train => *train,
                    Split::Val => *val,
                    Split::Test => *test,
                };
                synth::generate(*task, *seed, split, n, *height, *width, channels)
            }
        }
    }

    /// Training samples, cut into patches when patch training is on.
    pub fn load_training(&self, channels: usize) -> Result<Vec<Sample>> {
        let samples = self.load(Split::Train, channels)?;
        if self.patch_size == 0 {
            return Ok(samples);
        }
        let mut out = Vec::new();
        for s in &samples {
            let grid = PatchGrid::new(s.height(), s.width(), self.patch_size, self.patch_stride)?;
            out.extend(s.patches(&grid)?);
        }
        Ok(out)
    }
}

/// Everything a run needs, as read from the config file plus CLI overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(Variant::Dru),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::parse(text)?;
        ini.check_sections(&["model", "train", "data", "output"])?;
        let mut c = RunConfig::default();
        if let Some(s) = ini.section("model") {
            c.model = ModelConfig::from_section(s)?;
        }
        if let Some(s) = ini.section("train") {
            c.train = TrainConfig::from_section(s)?;
        }
        if let Some(s) = ini.section("data") {
            c.data = DataConfig::from_section(s, base)?;
        }
        if let Some(s) = ini.section("output") {
            s.check_keys(&["dir"])?;
            if let Some(d) = s.get("dir") {
                let p = PathBuf::from(d);
                c.output_dir = if p.is_absolute() { p } else { base.join(p) };
            }
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn render(&self) -> String {
        let mut out = Section::new("output");
        out.set("dir", self.output_dir.display());
        Ini {
            sections: vec![
                self.model.to_section(),
                self.train.to_section(),
                self.data.to_section(),
                out,
            ],
        }
        .render()
    }

    fn apply_overrides(&mut self, cli: &Cli) -> Result<()> {
        if let Some(s) = cli.seed {
            self.train.seed = s;
        }
        if let Some(n) = cli.iterations {
            self.model.iterations = n;
        }
        if let Some(o) = &cli.out {
            self.output_dir = o.clone();
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config("--threads", e.to_string()))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            tile,
        } => cmd_eval(cli, checkpoint, manifest.as_deref(), *split, tile),
        Command::Predict {
            checkpoint,
            image,
            tile,
        } => cmd_predict(cli, checkpoint, image, tile),
        Command::Bench {
            checkpoint,
            height,
            width,
            repetitions,
            warmup,
        } => cmd_bench(cli, checkpoint.as_deref(), *height, *width, *repetitions, *warmup),
        Command::Synth {
            task,
            train,
            val,
            test,
            size,
            channels,
        } => cmd_synth(cli, *task, [*train, *val, *test], *size, *channels),
        Command::Gradcheck { seeds } => cmd_gradcheck(*seeds),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::config("--out", "an output directory is required"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        return Err(Error::config("--config", "this command needs a config file"));
    };
    let mut c = RunConfig::from_file(path).map_err(|e| match e {
        Error::Io { .. } => Error::config("--config", e.to_string()),
        e => e,
    })?;
    c.apply_overrides(cli)?;
    Ok(c)
}

/// Per-parameter table with totals, one tensor per line.
pub fn parameter_breakdown<T: Real>(model: &RecurrentUNet<T>) -> String {
    let mut s = format!("# {} parameters: {}\n", model.config, model.count_parameters());
    for (name, shape, n) in model.params.table() {
        s.push_str(&format!("{name}\t{shape:?}\t{n}\n"));
    }
    s
}

fn epoch_line(s: &EpochSummary, total: usize) -> String {
    let val: Vec<String> = s.val.iter().map(|m| format!("{:.4}", m.report.miou)).collect();
    format!(
        "epoch {}/{}  loss {:.4}  train mIoU {:.4}  val mIoU [{}]  {:.1}s{}",
        s.epoch,
        total,
        s.train_loss,
        s.train.last().map(|m| m.report.miou).unwrap_or(0.0),
        val.join(", "),
        s.seconds,
        if s.improved { "  *" } else { "" }
    )
}

fn train_typed<T: Real>(cfg: &RunConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<()> {
    let mut model = RecurrentUNet::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    write_file(&cfg.output_dir.join("parameters.txt"), &parameter_breakdown(&model))?;
    println!(
        "{}: {} parameters, {} training samples",
        model.config,
        model.count_parameters(),
        train_set.len()
    );
    let mut tc = cfg.train.clone();
    tc.eval_tiling = cfg.data.tiling();
    let outcome = train(&mut model, train_set, val_set, &tc, Some(&cfg.output_dir), &mut |s| {
        println!("{}", epoch_line(s, tc.epochs))
    })?;
    println!(
        "best val mIoU {:.4} at epoch {}",
        outcome.best_val_miou, outcome.best_epoch
    );
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let mut cfg = load_run_config(cli)?;
    create_dir(&cfg.output_dir)?;
    // The snapshot lives inside the output folder, so relative paths would
    // no longer resolve when it is fed back in.
    cfg.output_dir = absolute(&cfg.output_dir)?;
    if let DataSource::Manifest(m) = &mut cfg.data.source {
        *m = absolute(m)?;
    }
    write_file(&cfg.output_dir.join("config.ini"), &cfg.render())?;
    let channels = cfg.model.image_channels;
    let train_set = cfg.data.load_training(channels)?;
    let val_set = cfg.data.load(Split::Val, channels)?;
    match cfg.train.precision.as_str() {
        "f64" => train_typed::<f64>(&cfg, &train_set, &val_set),
        _ => train_typed::<f32>(&cfg, &train_set, &val_set),
    }
}

/// A model in whichever precision its checkpoint was stored.
pub enum AnyModel {
    F32(RecurrentUNet<f32>),
    F64(RecurrentUNet<f64>),
}

macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<f64>(path)?;
        if ck.element_bytes == 4 {
            Ok(AnyModel::F32(load_checkpoint::<f32>(path)?.model()?))
        } else {
            Ok(AnyModel::F64(ck.model()?))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        with_model!(self, m => &m.config)
    }
}

fn tiling_from(tile: &TileArgs, fallback: Option<Tiling>) -> Result<Option<Tiling>> {
    match tile.patch_size {
        None => Ok(fallback),
        Some(p) => {
            let stride = tile.patch_stride.unwrap_or(p / 2);
            PatchGrid::new(p, p, p, stride).map_err(|e| Error::config("--patch-size", e.to_string()))?;
            Ok(Some(Tiling { patch: p, stride }))
        }
    }
}

fn eval_rows(metrics: &[IterationMetrics]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for m in metrics {
        let r = &m.report;
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.iteration, r.miou, r.mrec, r.mprec, r.f1, r.fg_iou, r.pr_break_even, m.loss
        ));
    }
    s
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, manifest: Option<&Path>, split: Split, tile: &TileArgs) -> Result<()> {
    let model = AnyModel::load(checkpoint)?;
    let iterations = cli.iterations.unwrap_or(model.config().iterations);
    if iterations == 0 {
        return Err(Error::config("--iterations", "must be at least 1"));
    }
    let channels = model.config().image_channels;
    let (samples, fallback) = match manifest {
        Some(m) => (Manifest::from_file(m)?.load(split, channels)?, None),
        None => {
            let cfg = load_run_config(cli)?;
            (cfg.data.load(split, channels)?, cfg.data.tiling())
        }
    };
    let tiling = tiling_from(tile, fallback)?;
    let metrics = with_model!(&model, m => evaluate(m, &samples, iterations, tiling))?;
    let table = eval_rows(&metrics);
    print!("{table}");
    if let Some(dir) = &cli.out {
        create_dir(dir)?;
        write_file(&dir.join("eval.csv"), &table)?;
    }
    Ok(())
}

fn cmd_predict(cli: &Cli, checkpoint: &Path, image: &Path, tile: &TileArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let model = AnyModel::load(checkpoint)?;
    let iterations = cli.iterations.unwrap_or(model.config().iterations);
    if iterations == 0 {
        return Err(Error::config("--iterations", "must be at least 1"));
    }
    let img = adapt_channels(read_image(image)?, model.config().image_channels)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let tiling = tiling_from(tile, None)?;
    let k = model.config().n_classes;
    let steps = with_model!(&model, m => predict_image(m, &img, iterations, tiling))?;
    create_dir(&dir)?;
    for (t, logits) in steps.iter().enumerate() {
        let prob = foreground_probability(logits, k)?;
        let p = prob.data();
        let mask: Vec<bool> = p.iter().map(|&v| quantize(v) >= 128).collect();
        write_gray(&dir.join(format!("prob_t{}.pgm", t + 1)), w, h, p)?;
        write_mask(&dir.join(format!("mask_t{}.png", t + 1)), w, h, &mask)?;
    }
    println!("wrote {} steps for {}x{} image to {}", steps.len(), w, h, dir.display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Timing summary of one benchmark run.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub parameters: usize,
    pub iterations: usize,
    pub height: usize,
    pub width: usize,
    /// Median latency of a single-step forward pass.
    pub single_step_ms: f64,
    /// Median latency of the full `iterations`-step forward pass.
    pub total_ms: f64,
}

impl BenchReport {
    pub fn per_iteration_ms(&self) -> f64 {
        self.total_ms / self.iterations as f64
    }

    pub fn fps(&self) -> f64 {
        1000.0 / self.total_ms
    }
}

/// Median forward latencies on a random `[1, C, height, width]` image,
/// padded to the network's spatial multiple.
pub fn benchmark<T: Real>(
    model: &RecurrentUNet<T>,
    iterations: usize,
    height: usize,
    width: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repetitions == 0 || iterations == 0 {
        return Err(Error::config("bench", "repetitions and iterations must be positive"));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let img = Tensor::<f32>::rand_uniform(vec![model.config.image_channels, height, width], 0.0, 1.0, &mut rng);
    let padded = crate::data::pad_to_multiple(&img, 16)?;
    let s = padded.shape().to_vec();
    let x = padded.cast::<T>().reshape(vec![1, s[0], s[1], s[2]])?;
    let time = |n: usize| -> Result<f64> {
        for _ in 0..warmup {
            model.predict(&x, n)?;
        }
        let mut v = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            model.predict(&x, n)?;
            v.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(median(v))
    };
    Ok(BenchReport {
        parameters: model.count_parameters(),
        iterations,
        height,
        width,
        single_step_ms: time(1)?,
        total_ms: time(iterations)?,
    })
}

fn cmd_bench(
    cli: &Cli,
    checkpoint: Option<&Path>,
    height: usize,
    width: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<()> {
    let model = match checkpoint {
        Some(p) => AnyModel::load(p)?,
        None => {
            let (cfg, seed) = match &cli.config {
                Some(_) => {
                    let c = load_run_config(cli)?;
                    (c.model, c.train.seed)
                }
                None => (ModelConfig::dru(4), cli.seed.unwrap_or(0)),
            };
            AnyModel::F32(RecurrentUNet::new(cfg, seed)?)
        }
    };
    let iterations = cli.iterations.unwrap_or(model.config().iterations);
    let rep = with_model!(&model, m => benchmark(m, iterations, height, width, repetitions, warmup))?;
    println!("model {}", model.config());
    println!("parameters {}", rep.parameters);
    println!(
        "input {}x{} (warmup {}, median of {})",
        width, height, warmup, repetitions
    );
    println!("latency_n1_ms {:.3}", rep.single_step_ms);
    println!("latency_total_ms {:.3} (N={})", rep.total_ms, rep.iterations);
    println!("latency_per_iteration_ms {:.3}", rep.per_iteration_ms());
    println!("fps {:.2}", rep.fps());
    if let Some(dir) = &cli.out {
        create_dir(dir)?;
        let text = with_model!(&model, m => parameter_breakdown(m));
        write_file(&dir.join("parameters.txt"), &text)?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, task: SynthTask, counts: [usize; 3], size: usize, channels: usize) -> Result<()> {
    let dir = out_dir(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let splits = [Split::Train, Split::Val, Split::Test];
    let sets = splits
        .iter()
        .zip(counts)
        .map(|(&s, n)| synth::generate(task, seed, s, n, size, size, channels))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Split, &[Sample])> = splits
        .iter()
        .zip(&sets)
        .filter(|(_, v)| !v.is_empty())
        .map(|(&s, v)| (s, v.as_slice()))
        .collect();
    let manifest = write_dataset(&dir, &pairs)?;
    println!(
        "wrote {} images to {}",
        counts.iter().sum::<usize>(),
        manifest.display()
    );
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<()> {
    let started = Instant::now();
    let results = suite::run_suite(seeds)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{}  {:<32} seeds {:>3}  checked {:>6}  max rel err {:.3e} (tol {:.0e})",
            if r.passes() { "PASS" } else { "FAIL" },
            r.name,
            r.seeds,
            r.checked,
            r.max_rel_err,
            r.tolerance
        );
        failed += usize::from(!r.passes());
    }
    println!(
        "{} cases, {} failed, {:.1}s",
        results.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Domain {
            op: "gradcheck",
            detail: format!("{failed} cases exceeded their tolerance"),
        });
    }
    Ok(())
}
