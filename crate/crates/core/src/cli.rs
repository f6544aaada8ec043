//! `dcfm` command line: gen, train, infer, eval, bench, gradcheck.
//!
//! Every command accepts `--config FILE` (a JSON object with optional
//! `model`, `train`, `schedule`, `gen`, `gradcheck` and `io` sections);
//! flags override file values. The merged configuration is written as
//! `resolved_config.json` next to the command's outputs, and
//! `dcfm <command> --config resolved_config.json` repeats the run.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    generate_synthetic, load_manifest, load_model, netpbm, save_model, synth, GenConfig, LabelMap,
    LabelMode,
};
use crate::engine::{bench, run_video, MergeMode, Policy, RunReport, ScheduleConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::metrics::{evaluate, VideoEval};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{train_with, TrainConfig};

/// Paths and evaluation options.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub video: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    /// Window lengths for video consistency.
    pub vc: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub classes: Option<usize>,
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub command: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub gen: GenConfig,
    pub gradcheck: GradcheckConfig,
    pub io: IoConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dcfm",
    version,
    about = "Keyframe video segmentation with reusable common features"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Segment one clip.
    Infer(InferArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Time inference on one clip.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelModeArg {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Fixed,
    #[value(alias = "adaptive")]
    Aks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "P", alias = "p")]
    P,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame size as HxW.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shapes: Option<usize>,
    #[arg(long)]
    pub max_speed: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub label_mode: Option<LabelModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (or its manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model file to write; the log and resolved config go beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_b: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub no_li: bool,
    #[arg(long)]
    pub no_lb: bool,
    #[arg(long)]
    pub no_lc: bool,
    #[arg(long)]
    pub no_hflip: bool,
    /// Seeds both parameter initialization and pair sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct ScheduleArgs {
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub min_k: Option<usize>,
    #[arg(long = "S", allow_negative_numbers = true)]
    pub s: Option<f64>,
    #[arg(long)]
    pub first_key: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory holding frame_NNNNN.ppm files.
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Consistency window lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub vc: Option<Vec<usize>>,
    /// Number of classes when `--gt` is a clip directory without a manifest.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Directory for eval_report.json and resolved_config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn base_config(path: &Option<PathBuf>, command: &str) -> Result<CliConfig> {
    let mut cfg = match path {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    cfg.command = Some(command.to_string());
    Ok(cfg)
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn set_opt<T>(dst: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *dst = v;
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "missing --{flag} (flag or io.{flag} in the config file)"
        ))
    })
}

fn apply_schedule(cfg: &mut ScheduleConfig, a: &ScheduleArgs) {
    set(
        &mut cfg.policy,
        a.policy.map(|p| match p {
            PolicyArg::Fixed => Policy::Fixed,
            PolicyArg::Aks => Policy::Adaptive,
        }),
    );
    set(&mut cfg.k, a.k);
    set(&mut cfg.min_k, a.min_k);
    set(&mut cfg.threshold, a.s);
    set(&mut cfg.first_key, a.first_key);
    set(
        &mut cfg.mode,
        a.mode.map(|m| match m {
            ModeArg::P => MergeMode::P,
            ModeArg::B => MergeMode::B,
        }),
    );
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Prints to stdout; a closed pipe is not an error.
fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads `frame_*.ppm` from `dir` in index order.
pub fn load_clip_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut files = indexed_files(dir, "frame_", ".ppm")?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!(
            "{}: no frame_*.ppm files",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|(_, p)| netpbm::read_ppm(p).map(|img| img.to_tensor()))
        .collect()
}

/// `(index, path)` of files named `{prefix}{index}{suffix}` in `dir`.
fn indexed_files(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(idx) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(suffix))
            .and_then(|d| d.parse::<usize>().ok())
        {
            out.push((idx, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "gen")?;
    let g = &mut cfg.gen;
    set(&mut g.videos, a.videos);
    set(&mut g.frames_per_video, a.frames);
    if let Some((h, w)) = a.size {
        g.height = h;
        g.width = w;
    }
    set(&mut g.classes, a.classes);
    set(&mut g.shapes_per_video, a.shapes);
    set(&mut g.max_speed, a.max_speed);
    set(&mut g.noise_sigma, a.noise);
    set(
        &mut g.label_mode,
        a.label_mode.map(|m| match m {
            LabelModeArg::Dense => LabelMode::Dense,
            LabelModeArg::Sparse => LabelMode::Sparse,
        }),
    );
    set(&mut g.seed, a.seed);
    set_opt(&mut cfg.io.out, a.out);
    cfg.gen.validate()?;
    let out = require(&cfg.io.out, "out")?.clone();
    let manifest = generate_synthetic(&cfg.gen, &out)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    log::info!("wrote {} clips to {}", manifest.videos.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "train")?;
    let t = &mut cfg.train;
    set(&mut t.iters, a.iters);
    set(&mut t.batch, a.batch);
    set(&mut t.base_lr, a.lr);
    set(&mut t.lambda_b, a.lambda_b);
    set(&mut t.lambda_c, a.lambda_c);
    if a.no_li {
        t.use_li = false;
    }
    if a.no_lb {
        t.use_lb = false;
    }
    if a.no_lc {
        t.use_lc = false;
    }
    if a.no_hflip {
        t.hflip = false;
    }
    if let Some(seed) = a.seed {
        t.seed = seed;
        cfg.model.seed = seed;
    }
    set_opt(&mut cfg.io.data, a.data);
    set_opt(&mut cfg.io.out, a.out);
    cfg.train.validate()?;
    let data = require(&cfg.io.data, "data")?.clone();
    let out = require(&cfg.io.out, "out")?.clone();
    let dataset = load_manifest(&data)?;
    cfg.model.num_classes = dataset.num_classes();
    cfg.model.validate()?;
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    create_dir(dir)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    let log_path = dir.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    let mut model = Model::new(cfg.model.clone())?;
    let result = train_with(&mut model, &dataset.clips, &cfg.train, |entry| {
        let line = serde_json::to_string(entry)?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if entry.iter % 100 == 0 {
            log::info!("iter {} total {:.4}", entry.iter, entry.total);
        }
        Ok(())
    });
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    save_model(&out, &model)
}

fn write_label(path: &Path, map: &LabelMap) -> Result<()> {
    netpbm::write_pgm(path, map)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "infer")?;
    apply_schedule(&mut cfg.schedule, &a.schedule);
    set_opt(&mut cfg.io.model, a.model);
    set_opt(&mut cfg.io.video, a.video);
    set_opt(&mut cfg.io.out, a.out);
    cfg.schedule.validate()?;
    let model_path = require(&cfg.io.model, "model")?.clone();
    let video = require(&cfg.io.video, "video")?.clone();
    let out = require(&cfg.io.out, "out")?.clone();
    let model = load_model(&model_path)?;
    cfg.model = model.config().clone();
    let frames = load_clip_frames(&video)?;
    let output = run_video(&model, &frames, &cfg.schedule)?;
    create_dir(&out)?;
    for (t, pred) in output.predictions.iter().enumerate() {
        write_label(&out.join(synth::label_file_name(t)), pred)?;
    }
    write_json(
        &out.join("run_report.json"),
        &RunReport::new(&output.report, &cfg.schedule),
    )?;
    write_json(&out.join("resolved_config.json"), &cfg)
}

/// Predictions and ground truth of one clip, read from disk.
struct LoadedEval {
    preds: Vec<LabelMap>,
    gts: Vec<Option<LabelMap>>,
}

fn read_labels(files: &[(usize, PathBuf)]) -> Result<Vec<(usize, LabelMap)>> {
    files
        .iter()
        .map(|(i, p)| netpbm::read_pgm(p).map(|m| (*i, m)))
        .collect()
}

fn load_eval_clip(
    pred_dir: &Path,
    gt: Vec<(usize, LabelMap)>,
    frames: Option<usize>,
) -> Result<LoadedEval> {
    let preds = read_labels(&indexed_files(pred_dir, "label_", ".pgm")?)?;
    let n = frames.unwrap_or_else(|| {
        preds
            .iter()
            .map(|p| p.0 + 1)
            .chain(gt.iter().map(|g| g.0 + 1))
            .max()
            .unwrap_or(0)
    });
    let mut pred_slots: Vec<Option<LabelMap>> = vec![None; n];
    for (i, m) in preds {
        if i < n {
            pred_slots[i] = Some(m);
        }
    }
    let mut gts = vec![None; n];
    for (i, m) in gt {
        if i >= n {
            return Err(Error::Format(format!(
                "ground-truth index {i} beyond {n} frames"
            )));
        }
        gts[i] = Some(m);
    }
    let preds = pred_slots
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| {
                Error::Format(format!(
                    "{}: missing prediction {}",
                    pred_dir.display(),
                    synth::label_file_name(i)
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoadedEval { preds, gts })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "eval")?;
    set_opt(&mut cfg.io.pred, a.pred);
    set_opt(&mut cfg.io.gt, a.gt);
    set_opt(&mut cfg.io.vc, a.vc);
    set_opt(&mut cfg.io.classes, a.classes);
    set_opt(&mut cfg.io.out, a.out);
    let pred = require(&cfg.io.pred, "pred")?.clone();
    let gt = require(&cfg.io.gt, "gt")?.clone();
    let vc = cfg.io.vc.clone().unwrap_or_else(|| vec![8, 16]);
    let manifest_path = gt.join("manifest.json");
    let (clips, num_classes) = if manifest_path.is_file() {
        let ds = load_manifest(&manifest_path)?;
        let clips = ds
            .clips
            .iter()
            .map(|c| {
                let gts = c.labels.iter().map(|(&i, m)| (i, m.clone())).collect();
                load_eval_clip(&pred.join(&c.id), gts, Some(c.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        (clips, cfg.io.classes.unwrap_or(ds.num_classes()))
    } else {
        let gts = read_labels(&indexed_files(&gt, "label_", ".pgm")?)?;
        if gts.is_empty() {
            return Err(Error::Format(format!(
                "{}: no label_*.pgm files",
                gt.display()
            )));
        }
        let clip = load_eval_clip(&pred, gts, None)?;
        let inferred = clip
            .preds
            .iter()
            .chain(clip.gts.iter().flatten())
            .flat_map(|m| m.data().iter().copied())
            .filter(|&v| v != crate::label::IGNORE_LABEL)
            .max()
            .map_or(1, |m| m as usize + 1);
        (vec![clip], cfg.io.classes.unwrap_or(inferred))
    };
    let videos: Vec<VideoEval<'_>> = clips
        .iter()
        .map(|c| VideoEval {
            preds: &c.preds,
            gts: &c.gts,
        })
        .collect();
    let report = evaluate(&videos, num_classes, &vc)?;
    print_json(&report)?;
    if let Some(out) = &cfg.io.out {
        create_dir(out)?;
        write_json(&out.join("eval_report.json"), &report)?;
        write_json(&out.join("resolved_config.json"), &cfg)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "bench")?;
    apply_schedule(&mut cfg.schedule, &a.schedule);
    set_opt(&mut cfg.io.model, a.model);
    set_opt(&mut cfg.io.video, a.video);
    set_opt(&mut cfg.io.reps, a.reps);
    set_opt(&mut cfg.io.out, a.out);
    cfg.schedule.validate()?;
    let model = load_model(require(&cfg.io.model, "model")?)?;
    cfg.model = model.config().clone();
    let frames = load_clip_frames(require(&cfg.io.video, "video")?)?;
    let reps = cfg.io.reps.unwrap_or(5);
    let report = bench(&model, &frames, &cfg.schedule, reps)?;
    print_json(&report)?;
    if let Some(out) = &cfg.io.out {
        create_dir(out)?;
        write_json(&out.join("bench_report.json"), &report)?;
        write_json(&out.join("resolved_config.json"), &cfg)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = base_config(&a.config, "gradcheck")?;
    set(&mut cfg.gradcheck.seed, a.seed);
    if let Some((h, w)) = a.size {
        cfg.gradcheck.height = h;
        cfg.gradcheck.width = w;
    }
    set_opt(&mut cfg.io.out, a.out);
    let report = run_gradcheck(&cfg.gradcheck)?;
    println!(
        "{} entries over {}/{} tensors, max relative error {:.3e} (tolerance {:.0e})",
        report.entries.len(),
        report.tensors_covered,
        report.tensors_total,
        report.max_rel_error,
        cfg.gradcheck.tolerance
    );
    if let Some(out) = &cfg.io.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck_report.json"), &report)?;
        write_json(&out.join("resolved_config.json"), &cfg)?;
    }
    if !report.passed {
        return Err(Error::CheckFailed(format!(
            "max relative error {:.3e}, {}/{} tensors covered",
            report.max_rel_error, report.tensors_covered, report.tensors_total
        )));
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
