use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use smalldet_core::gradsuite::{self, SuiteModule, TOLERANCE};
use smalldet_core::tape::{set_backward_mutation, space_to_depth_values, OpKind};
use smalldet_core::{FocalerParams, Tensor};

use smalldet::checkpoint::Checkpoint;
use smalldet::config::{read_json, resolve_precision, write_json, SceneSpec, TrainConfig};
use smalldet::dataset::{generate, Dataset};
use smalldet::eval::{evaluate, EvalSettings, DEFAULT_CONFIDENCE, DEFAULT_NMS_IOU};
use smalldet::sweep::{sweep, write_csv};
use smalldet::train::train;

#[derive(Parser)]
#[command(name = "smalldet", version, about = "Small-object detection blocks: checks, data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Core,
    Padf,
    Spdc,
    Mfff,
    Loss,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every backward rule (double precision).
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Deliberately perturb one backward rule (self-test of the suite).
        #[arg(long, hide = true)]
        mutate: Option<String>,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train the toy detector; writes the checkpoint and `<out>.loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// single or double; overrides SMALLDET_PRECISION and the config.
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
        confidence: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
        nms_iou: f64,
        #[arg(long)]
        precision: Option<String>,
    },
    /// Write the four space-to-depth slices of a grayscale image.
    DemoSpd {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate focaler and box-loss values over an IoU grid.
    LossSweep {
        #[arg(long, default_value_t = 0.0)]
        d: f64,
        #[arg(long, default_value_t = 0.95)]
        u: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Gradcheck {
            module,
            seeds,
            mutate,
        } => gradcheck(module, seeds, mutate.as_deref()),
        Command::Gen { spec, out, count } => {
            let spec: SceneSpec = read_json(&spec)?;
            let data = generate(&spec, count)?;
            data.save(&out)?;
            let objects: usize = data.samples.iter().map(|s| s.objects.len()).sum();
            println!("wrote {} images ({objects} objects) to {}", data.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            data,
            out,
            precision,
            quiet,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let precision = resolve_precision(precision.as_deref(), &cfg.precision)?;
            let data = Dataset::load(&data)?;
            let outcome = train(&cfg, &data, precision, |epoch, loss| {
                if !quiet {
                    println!("epoch {epoch:>4}  loss {loss:.6}");
                }
            })?;
            outcome.checkpoint.save(&out)?;
            let curve = loss_curve_path(&out);
            write_curve(&curve, outcome.loss_curve())?;
            let m = &outcome.checkpoint.meta;
            println!(
                "initial loss {:.6}, final loss {:.6}; checkpoint {}, curve {}",
                m.initial_loss,
                m.final_loss,
                out.display(),
                curve.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            ckpt,
            data,
            report,
            confidence,
            nms_iou,
            precision,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let precision = resolve_precision(precision.as_deref(), &ck.meta.train.precision)?;
            let data = Dataset::load(&data)?;
            let settings = EvalSettings {
                confidence_threshold: confidence,
                nms_iou,
            };
            let r = evaluate(&ck, &data, settings, precision)?;
            write_json(&report, &r)?;
            println!(
                "mAP50 {:.4}  mAP50-95 {:.4}  ({} detections, {} ground truths)",
                r.scores.map50, r.scores.map50_95, r.scores.detections, r.scores.ground_truths
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::DemoSpd { input, out } => demo_spd(&input, &out),
        Command::LossSweep { d, u, steps, out } => {
            if steps == 0 {
                bail!("--steps must be positive");
            }
            let rows = sweep(FocalerParams::new(d, u)?, steps)?;
            write_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn loss_curve_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn write_curve(path: &Path, curve: &[f64]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    w.write_record(["epoch", "loss"])?;
    for (i, v) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush().with_context(|| path.display().to_string())?;
    Ok(())
}

fn gradcheck(module: ModuleArg, seeds: u64, mutate: Option<&str>) -> anyhow::Result<ExitCode> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    if let Some(name) = mutate {
        let Some(kind) = OpKind::from_name(name) else {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            bail!("unknown op {name:?}; expected one of {}", known.join(", "));
        };
        set_backward_mutation(Some(kind));
    }
    let modules: Vec<SuiteModule> = match module {
        ModuleArg::All => SuiteModule::ALL.to_vec(),
        ModuleArg::Core => vec![SuiteModule::Core],
        ModuleArg::Padf => vec![SuiteModule::Padf],
        ModuleArg::Spdc => vec![SuiteModule::Spdc],
        ModuleArg::Mfff => vec![SuiteModule::Mfff],
        ModuleArg::Loss => vec![SuiteModule::Loss],
    };
    let rows = gradsuite::run(&modules, seeds)?;
    println!("{:<8} {:<24} {:>12} {:>6}", "module", "case", "max rel err", "");
    let mut failed = 0;
    for case in gradsuite::cases().iter().filter(|c| modules.contains(&c.module)) {
        let mine: Vec<_> = rows.iter().filter(|r| r.name == case.name).collect();
        let worst = mine.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|r| r.passed());
        failed += usize::from(!ok);
        println!(
            "{:<8} {:<24} {:>12.3e} {:>6}",
            case.module.name(),
            case.name,
            worst,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} cases × {seeds} seeds, tolerance {TOLERANCE:e}: {failed} failing", rows.len() as u64 / seeds);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn demo_spd(input: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let img = image::open(input)
        .with_context(|| format!("{}: cannot read image", input.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w % 2 != 0 || h % 2 != 0 {
        bail!("{}: image is {w}×{h}; both sides must be even", input.display());
    }
    let t = Tensor::new([1, 1, h, w], img.pixels().map(|p| p.0[0] as f64).collect())?;
    let s = space_to_depth_values(&t)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let (hh, hw) = (h / 2, w / 2);
    for k in 0..4 {
        let plane = &s.data()[k * hh * hw..(k + 1) * hh * hw];
        let buf: Vec<u8> = plane.iter().map(|&v| v as u8).collect();
        let slice = image::GrayImage::from_raw(hw as u32, hh as u32, buf).expect("plane size");
        let path = out.join(format!("x{}.pgm", k + 1));
        slice
            .save(&path)
            .with_context(|| format!("{}: cannot write image", path.display()))?;
    }
    println!("wrote x1.pgm..x4.pgm ({hw}×{hh}) to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
