//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config_file::ConfigFile;
use crate::data::{downscale, psnr, ssim, Dataset, ImageBuffer};
use crate::error::Error;
use crate::hessian::{bench_eigen, default_bench_sizes, mshf, SUPPORTED_SCALES};
use crate::lmap::RawMap;
use crate::model::{count_params, count_reference_flops, Checkpoint, DefianModel, ModelConfig};
use crate::train::{trace_csv, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "defian",
    version,
    about = "Detail-fidelity attention super-resolution toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write multi-scale Hessian eigenvalue maps of an image
    Filter(FilterArgs),
    /// Time closed-form eigenvalues against a per-pixel eigen-solver
    BenchEig(BenchArgs),
    /// Train a model
    Train(TrainArgs),
    /// Score a checkpoint on a directory of HR images
    Eval(EvalArgs),
    /// Upscale one image
    Sr(SrArgs),
    /// Print parameter and multiply-accumulate counts
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    pub input: PathBuf,
    /// Stencil scales, comma separated
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    pub scales: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sizes as CxHxW, comma separated; defaults to {1,4,16,64} x {1,2,4,8}^2
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of HR PNGs; overrides [data] hr_dir
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub hr: PathBuf,
    /// LR images; generated by bicubic downscaling when absent
    #[arg(long)]
    pub lr: Option<PathBuf>,
    /// Border pixels ignored by the metrics; defaults to the scale
    #[arg(long)]
    pub crop: Option<usize>,
    /// CSV destination; stdout if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG; defaults to <stem>_x<scale>.png next to the input
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Config file with a [model] section
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = crate::init_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Filter(a) => cmd_filter(&a),
        Command::BenchEig(a) => cmd_bench(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sr(a) => cmd_sr(&a),
        Command::Count(a) => cmd_count(&a),
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Linear min-max stretch to `[0, 255]`; a flat map becomes black.
pub fn normalize_map(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if range.is_nan() || range <= f32::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn cmd_filter(a: &FilterArgs) -> CliResult<()> {
    if let Some(bad) = a.scales.iter().find(|s| !SUPPORTED_SCALES.contains(s)) {
        return Err(CliError::Usage(format!(
            "unsupported scale {bad} for --scales; supported scales: {}",
            SUPPORTED_SCALES.map(|s| s.to_string()).join(", ")
        )));
    }
    if a.scales.is_empty() {
        return Err(CliError::Usage("--scales needs at least one value".into()));
    }
    let img = ImageBuffer::load_png(&a.input)?;
    let x = img.to_tensor::<f32>(1.0);
    let maps = mshf(&x, &a.scales)?;
    std::fs::create_dir_all(&a.out)?;
    let stem = stem_of(&a.input);
    let (w, h) = (img.width(), img.height());
    for (i, ker) in a.scales.iter().enumerate() {
        let plane = maps.plane(0, i);
        let base = a.out.join(format!("{stem}_k{ker}"));
        crate::data::image::save_gray_png(&base.with_extension("png"), w, h, &normalize_map(plane))?;
        RawMap::new(vec![h, w], plane.to_vec())?.save(&base.with_extension("lmap"))?;
        println!("{}", base.with_extension("png").display());
    }
    Ok(())
}

fn parse_size(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let bad = || CliError::Usage(format!("size {s:?} is not CxHxW"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    if v.contains(&0) {
        return Err(bad());
    }
    Ok((v[0], v[1], v[2]))
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let sizes = if a.sizes.is_empty() {
        default_bench_sizes()
    } else {
        a.sizes.iter().map(|s| parse_size(s)).collect::<CliResult<_>>()?
    };
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let report = bench_eigen(&sizes, a.reps, a.seed)?;
    write_or_print(a.out.as_deref(), &report.to_csv())
}

/// `[model]`, `[train]` and `[data]` from a run configuration.
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hr_dir: Option<PathBuf>,
    pub lr_dir: Option<PathBuf>,
    /// Number of generated images used when no directory is given.
    pub synthetic: Option<(usize, usize)>,
    pub init_seed: u64,
}

impl RunConfig {
    pub fn from_file(file: &ConfigFile) -> crate::error::Result<Self> {
        file.check_sections(&["model", "train", "data"])?;
        let empty = crate::config_file::Section::new("model");
        let model = ModelConfig::from_section(file.section("model").unwrap_or(&empty))?;
        let empty = crate::config_file::Section::new("train");
        let train = TrainConfig::from_section(file.section("train").unwrap_or(&empty))?;
        let empty = crate::config_file::Section::new("data");
        let d = file.section("data").unwrap_or(&empty);
        d.check_known(&["hr_dir", "lr_dir", "synthetic", "synthetic_size", "init_seed"])?;
        let synthetic = match d.get::<usize>("synthetic")? {
            Some(n) if n > 0 => Some((n, d.get_or("synthetic_size", 96usize)?)),
            _ => None,
        };
        Ok(Self {
            model,
            train,
            hr_dir: d.get::<String>("hr_dir")?.map(PathBuf::from),
            lr_dir: d.get::<String>("lr_dir")?.map(PathBuf::from),
            synthetic,
            init_seed: d.get_or("init_seed", 0u64)?,
        })
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let file = ConfigFile::load(&a.config)?;
    let run = RunConfig::from_file(&file)?;
    let scale = run.model.scale;
    let dataset = match (a.data.as_ref().or(run.hr_dir.as_ref()), run.synthetic) {
        (Some(dir), _) => Dataset::load_dir(dir, run.lr_dir.as_deref(), scale)?,
        (None, Some((n, size))) => Dataset::synthetic(n, size, scale, run.train.seed)?,
        (None, None) => {
            return Err(CliError::Usage(
                "no training data: pass --data or set [data] hr_dir or synthetic".into(),
            ))
        }
    };
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load_for_resume(p, &run.model)?, run.train.clone())?,
        None => Trainer::new(DefianModel::new(run.model.clone(), run.init_seed)?, run.train.clone())?,
    };
    let csv_path = a.out.join("loss.csv");
    let resumed = a.resume.is_some() && csv_path.is_file();
    let total = run.train.total_updates;
    let trace = trainer.run(&dataset, total, Some(&a.out), |r| {
        if r.step % 50 == 0 || r.step == total {
            eprintln!("update {}/{total} lr {:e} loss {:.6}", r.step, r.lr, r.loss);
        }
    })?;
    let csv = trace_csv(&trace);
    if resumed {
        let mut f = OpenOptions::new().append(true).open(&csv_path)?;
        f.write_all(csv.split_once('\n').map(|(_, rows)| rows).unwrap_or("").as_bytes())?;
    } else {
        std::fs::write(&csv_path, csv)?;
    }
    println!("checkpoint={}", a.out.join("final.dfan").display());
    println!("loss_csv={}", csv_path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.model()?;
    let s = model.config().scale;
    let range = model.config().rgb_range;
    let crop = a.crop.unwrap_or(s);
    let data = Dataset::load_dir(&a.hr, a.lr.as_deref(), s)?;
    let mut csv = String::from("image,psnr,ssim\n");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for item in data.items() {
        let lr = match &item.lr {
            Some(l) => l.clone(),
            None => downscale(&item.hr, s)?,
        };
        let hr = item.hr.crop(0, 0, lr.width() * s, lr.height() * s)?;
        let out = model.infer(&lr.to_tensor::<f32>(range))?;
        let sr = ImageBuffer::from_tensor(&out, 0, range)?;
        let p = psnr(&sr, &hr, crop)?;
        let q = ssim(&sr, &hr, crop)?;
        sum_p += p;
        sum_s += q;
        let _ = writeln!(csv, "{},{p:.4},{q:.6}", item.name);
    }
    let n = data.len() as f64;
    let _ = writeln!(csv, "mean,{:.4},{:.6}", sum_p / n, sum_s / n);
    write_or_print(a.out.as_deref(), &csv)
}

fn cmd_sr(a: &SrArgs) -> CliResult<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let s = model.config().scale;
    let range = model.config().rgb_range;
    let img = ImageBuffer::load_png(&a.input)?;
    let out = model.infer(&img.to_tensor::<f32>(range))?;
    let sr = ImageBuffer::from_tensor(&out, 0, range)?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| a.input.with_file_name(format!("{}_x{s}.png", stem_of(&a.input))));
    sr.save_png(&path)?;
    println!("{} ({}x{})", path.display(), sr.width(), sr.height());
    Ok(())
}

fn cmd_count(a: &CountArgs) -> CliResult<()> {
    let cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let file = ConfigFile::load(path)?;
            let empty = crate::config_file::Section::new("model");
            ModelConfig::from_section(file.section("model").unwrap_or(&empty))?
        }
        (None, Some(p)) => {
            let cfg = ModelConfig::preset(p, a.scale).map_err(|e| CliError::Usage(e.to_string()))?;
            cfg.validate()?;
            cfg
        }
        (None, None) => return Err(CliError::Usage("pass --config or --preset".into())),
    };
    let model = DefianModel::<f32>::new(cfg.clone(), 0)?;
    let params = count_params(&model);
    let macs = count_reference_flops(&cfg)?;
    println!("params_trainable={}", params.trainable);
    println!("params_frozen={}", params.frozen);
    println!("params_total={}", params.total());
    println!("params_k={:.1}", params.total() as f64 / 1e3);
    println!("multi_adds={macs}");
    println!("multi_adds_g={:.1}", macs as f64 / 1e9);
    Ok(())
}
