//! Command-line front end: `synth`, `train`, `fuse`, `eval`, `gradcheck`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric or verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_feature_net, stored_dtype, Checkpoint};
use crate::error::{Error, Result};
use crate::ldr::{
    assemble_input, crop_patches, load_bracket, synth_scene, write_bracket, write_pfm, write_png8, ExposureBracket,
    SynthParams, DEFAULT_GAMMA,
};
use crate::network::{parse_kv, HdrTransformer, NetworkConfig};
use crate::objective::{mu_tonemap_image, MU};
use crate::tape::Primitive;
use crate::tensor::{DType, Scalar};
use crate::trainer::{evaluate, EvalSample, StepRecord, TrainConfig, Trainer};
use crate::verify::{run_suite, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Domain(_) | Error::Ingest { .. } | Error::Checkpoint(_) | Error::Io { .. } => EXIT_DATA,
        Error::Shape { .. }
        | Error::Contract(_)
        | Error::NonFinite { .. }
        | Error::NonFiniteLoss { .. }
        | Error::Verification(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hdrfuse", version, about = "Ghost-free HDR fusion of exposure brackets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural exposure brackets with ground truth.
    Synth(SynthArgs),
    /// Train a model on a directory of brackets.
    Train(TrainArgs),
    /// Fuse one bracket into a linear HDR image.
    Fuse(FuseArgs),
    /// Score a checkpoint on brackets with ground truth.
    Eval(EvalArgs),
    /// Check every adjoint against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub motion: usize,
    #[arg(long, default_value_t = 0.2)]
    pub saturation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file of network and `train.*` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Desk-scale network with batch 4, 64×64 patches and lr 1e-3.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub patch_stride: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Continue from this checkpoint up to `--steps`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Perceptual feature weights; seeded weights otherwise.
    #[arg(long)]
    pub feature_net: Option<PathBuf>,
    /// Per-step CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub bracket: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 8-bit μ-law preview.
    #[arg(long)]
    pub tonemapped: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network `key = value` file; the desk-scale network otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub max_coords: usize,
    /// Corrupt one primitive's adjoint.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let line = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, &line),
        Command::Train(a) => cmd_train(&a, &line),
        Command::Fuse(a) => cmd_fuse(&a, &line),
        Command::Eval(a) => cmd_eval(&a, &line),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HDRFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HDRFUSE_THREADS must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the process already fixes the width.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub argv: String,
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "argv = {}", self.argv);
        let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
        if let Some(s) = self.seed {
            let _ = writeln!(out, "seed = {s}");
        }
        for p in &self.inputs {
            let _ = writeln!(out, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(out, "output = {}", p.display());
        }
        let _ = writeln!(out, "wall_clock_secs = {:.3}", self.wall_clock_secs);
        for line in self.config.lines() {
            let _ = writeln!(out, "config.{line}");
        }
        out
    }

    /// Writes `<path>.manifest` via a temporary file and a rename.
    pub fn write_beside(&self, path: &Path) -> Result<PathBuf> {
        let mut name = path.as_os_str().to_owned();
        name.push(".manifest");
        let target = PathBuf::from(name);
        write_atomic(&target, self.render().as_bytes())?;
        Ok(target)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One bracket directory, or every bracket directory directly below `dir`
/// in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, ExposureBracket)>> {
    if dir.join("exposure.txt").is_file() {
        let name = dir.file_name().map_or("sample".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, load_bracket(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::ingest(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("exposure.txt").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::ingest(dir, "no bracket directories found"));
    }
    subdirs
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            Ok((name, load_bracket(&p)?))
        })
        .collect()
}

fn with_gt(set: Vec<(String, ExposureBracket)>, dir: &Path) -> Result<Vec<EvalSample>> {
    set.into_iter()
        .map(|(name, b)| {
            let input = assemble_input(&b, DEFAULT_GAMMA)?;
            let gt = b
                .gt_hdr
                .ok_or_else(|| Error::ingest(dir.join(&name), "bracket has no ground-truth HDR"))?;
            Ok(EvalSample { name, input, gt })
        })
        .collect()
}

pub fn cmd_synth(a: &SynthArgs, argv: &str) -> Result<i32> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut outputs = Vec::new();
    for i in 0..a.count {
        let p = SynthParams {
            seed: a.seed + i as u64,
            size: a.size,
            motion_px: a.motion,
            saturation_frac: a.saturation,
        };
        let scene = synth_scene(&p)?;
        let dir = a.out.join(format!("sample_{i:03}"));
        write_bracket(&dir, &scene.bracket)?;
        outputs.push(dir);
    }
    RunManifest {
        command: "synth".into(),
        argv: argv.into(),
        config: format!(
            "count = {}\nsize = {}\nmotion = {}\nsaturation = {}\n",
            a.count, a.size, a.motion, a.saturation
        ),
        seed: Some(a.seed),
        outputs,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        ..RunManifest::default()
    }
    .write_beside(&a.out.join("synth"))?;
    println!("wrote {} brackets to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

/// Network and training settings from base presets, an optional file, then
/// explicit flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<(NetworkConfig, TrainConfig)> {
    let (mut net, mut train) = if a.tiny {
        (NetworkConfig::tiny(), TrainConfig::tiny())
    } else {
        (NetworkConfig::default(), TrainConfig::default())
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            if let Some(rest) = k.strip_prefix("train.") {
                train.set(rest, &v)?;
            } else {
                net.set(&k, &v)?;
            }
        }
    }
    if let Some(v) = a.steps {
        train.steps = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.lr {
        train.lr = v;
    }
    if let Some(v) = a.patch_size {
        train.patch_size = v;
    }
    if let Some(v) = a.patch_stride {
        train.patch_stride = v;
    }
    if let Some(v) = a.clip_norm {
        train.clip_norm = v;
    }
    if a.no_augment {
        train.augment = false;
    }
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}

pub fn cmd_train(a: &TrainArgs, argv: &str) -> Result<i32> {
    match a.precision {
        Precision::F32 => train_as::<f32>(a, argv),
        Precision::F64 => train_as::<f64>(a, argv),
    }
}

fn train_as<T: Scalar>(a: &TrainArgs, argv: &str) -> Result<i32> {
    let t0 = Instant::now();
    let set = load_dataset(&a.data)?;
    let samples: Vec<_> = with_gt(set, &a.data)?.into_iter().map(|s| (s.input, s.gt)).collect();

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ck = Checkpoint::<T>::load(path)?;
            if let Some(s) = a.steps {
                ck.train.steps = s;
            }
            let data = crop_patches(&samples, ck.train.patch_size, ck.train.patch_stride)?;
            Trainer::resume(ck, data)?
        }
        None => {
            let (net, train) = resolve_train_config(a)?;
            let data = crop_patches(&samples, train.patch_size, train.patch_stride)?;
            Trainer::new(net, train, data)?
        }
    };
    if let Some(path) = &a.feature_net {
        trainer = trainer.with_feature_net(load_feature_net(path)?);
    }
    log::info!(
        "training {} parameters on {} patches for {} steps",
        trainer.weights.param_count(),
        trainer.patches().len(),
        trainer.train.steps
    );
    let mut csv = format!("{}\n", StepRecord::CSV_HEADER);
    let every = trainer.train.probe_every.max(1);
    let records = trainer.run(|r| {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        if r.step == 1 || r.step % every == 0 {
            let probe = r.probe_psnr_mu.map_or(String::new(), |p| format!(" probe psnr-mu {p:.2} dB"));
            eprintln!("step {:>6} loss {:.5} (l1 {:.5}, perceptual {:.5}){probe}", r.step, r.total, r.l_r, r.l_p);
        }
    })?;
    let ck = trainer.checkpoint();
    ck.save(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(log) = &a.log {
        write_atomic(log, csv.as_bytes())?;
        outputs.push(log.clone());
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.resume.iter().cloned());
    inputs.extend(a.feature_net.iter().cloned());
    RunManifest {
        command: "train".into(),
        argv: argv.into(),
        config: format!("dtype = {}\n{}{}", T::DTYPE, ck.network.to_kv(), ck.train.to_kv()),
        seed: Some(ck.train.seed),
        inputs,
        outputs,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
    }
    .write_beside(&a.out)?;
    if let Some(last) = records.last() {
        println!("step {} loss {:.6}", last.step, last.total);
    }
    println!("saved {}", a.out.display());
    Ok(EXIT_OK)
}

fn load_model<T: Scalar>(path: &Path) -> Result<HdrTransformer<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    HdrTransformer::from_parts(ck.network, ck.weights)
}

pub fn cmd_fuse(a: &FuseArgs, argv: &str) -> Result<i32> {
    match stored_dtype(&a.ckpt)? {
        DType::F32 => fuse_as::<f32>(a, argv),
        DType::F64 => fuse_as::<f64>(a, argv),
    }
}

fn fuse_as<T: Scalar>(a: &FuseArgs, argv: &str) -> Result<i32> {
    let t0 = Instant::now();
    let model = load_model::<T>(&a.ckpt)?;
    let bracket = load_bracket(&a.bracket)?;
    let ws = model.config.window;
    if bracket.height() < ws || bracket.width() < ws {
        return Err(Error::Config(format!(
            "bracket is {}x{} but the model's window size is {ws}; inputs must be at least {ws}x{ws}",
            bracket.height(),
            bracket.width()
        )));
    }
    let hdr = model.infer(&assemble_input(&bracket, DEFAULT_GAMMA)?)?;
    write_pfm(&a.out, &hdr)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(png) = &a.tonemapped {
        write_png8(png, &mu_tonemap_image(&hdr, MU)?)?;
        outputs.push(png.clone());
    }
    RunManifest {
        command: "fuse".into(),
        argv: argv.into(),
        config: format!("dtype = {}\n{}", T::DTYPE, model.config.to_kv()),
        inputs: vec![a.ckpt.clone(), a.bracket.clone()],
        outputs,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        ..RunManifest::default()
    }
    .write_beside(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, argv: &str) -> Result<i32> {
    match stored_dtype(&a.ckpt)? {
        DType::F32 => eval_as::<f32>(a, argv),
        DType::F64 => eval_as::<f64>(a, argv),
    }
}

fn eval_as<T: Scalar>(a: &EvalArgs, argv: &str) -> Result<i32> {
    let t0 = Instant::now();
    let model = load_model::<T>(&a.ckpt)?;
    let samples = with_gt(load_dataset(&a.data)?, &a.data)?;
    let report = evaluate(&model, &samples)?;
    write_atomic(&a.report, report.to_csv().as_bytes())?;
    RunManifest {
        command: "eval".into(),
        argv: argv.into(),
        config: format!("dtype = {}\n{}", T::DTYPE, model.config.to_kv()),
        inputs: vec![a.ckpt.clone(), a.data.clone()],
        outputs: vec![a.report.clone()],
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        ..RunManifest::default()
    }
    .write_beside(&a.report)?;
    let m = report.mean();
    println!(
        "{} samples: PSNR-l {:.3} dB, PSNR-mu {:.3} dB, SSIM-l {:.5}, SSIM-mu {:.5}",
        report.rows.len(),
        m.psnr_l,
        m.psnr_mu,
        m.ssim_l,
        m.ssim_mu
    );
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let network = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            NetworkConfig::from_kv(&text)?
        }
        None => NetworkConfig::tiny(),
    };
    let fault = match &a.inject_fault {
        Some(name) => Some(
            Primitive::from_name(name).ok_or_else(|| Error::Config(format!("unknown primitive `{name}`")))?,
        ),
        None => None,
    };
    let report = run_suite(&VerifyOptions {
        network,
        seed: a.seed,
        max_coords: a.max_coords,
        fault,
        ..VerifyOptions::default()
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        let names: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{} ({})", c.block, c.case))
            .collect();
        eprintln!("gradient check failed: {}", names.join(", "));
        Ok(EXIT_NUMERIC)
    }
}
