use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use inbn_core::bbox::{parse_box_line, write_boxes, BBox};
use inbn_core::bench::{bench_attn, bench_csv, BenchShape};
use inbn_core::checkpoint;
use inbn_core::dump::dump_attention;
use inbn_core::gradcheck::run_suite;
use inbn_core::harness::{
    evaluate, generate_sequence, loss_csv, metrics_csv, train_toy, ToyTaskConfig, TrainConfig,
};
use inbn_core::image::{read_pnm, write_pnm, Image};
use inbn_core::model::ModelConfig;
use inbn_core::tracker::Tracker;
use inbn_tensor::{FiniteDiff, OP_NAMES};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Smallest tolerance a 32-bit gradient check can meaningfully resolve.
const F32_MIN_TOL: f64 = 1e-2;
/// Finite-difference step for 32-bit checks.
const F32_STEP: f64 = 1e-2;

#[derive(Parser)]
#[command(name = "inbn", version, about = "Windowed interaction backbone tracker: checks, benchmarks, training and tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference gradient checks of every differentiable block.
    Gradcheck {
        #[arg(long, default_value = "toy", value_parser = ["toy", "full-tiny"])]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Corrupt the backward pass of this tape op (test fixture).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Analytic MAC counts and timed CSA forwards over (size, win) pairs.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "28,56")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "7,14")]
        win: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy model on the synthetic task.
    TrainToy {
        /// JSON with optional "preset", "task" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_tca: bool,
        #[arg(long)]
        no_wp: bool,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to the checkpoint path with `.loss.csv` appended.
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Track through a directory of PGM/PPM frames.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Frame-0 box as "x,y,w,h" (top-left corner form).
        #[arg(long)]
        init: String,
        /// Hanning window weight; the checkpoint's value when absent.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write CSA/TCA activation heatmaps of one stage as PGM files.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        init: String,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on fresh synthetic sequences.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one synthetic sequence as PGM frames plus groundtruth.txt.
    GenSeq {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    preset: Option<String>,
    task: ToyTaskConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn parse_init(s: &str) -> Result<BBox> {
    parse_box_line(s).with_context(|| format!("--init expects \"x,y,w,h\", got {s:?}"))
}

fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("pgm" | "ppm")
        )
    });
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm/.ppm frames in {}", dir.display());
    }
    paths.iter().map(|p| Ok(read_pnm(p)?)).collect()
}

fn gradcheck(preset: &str, seed: u64, tol: f64, precision: Precision, fault: Option<String>) -> Result<bool> {
    if let Some(op) = fault.as_deref().filter(|op| !OP_NAMES.contains(op)) {
        bail!("unknown op {op:?} for --inject-fault");
    }
    let (fd, results) = match precision {
        Precision::F64 => {
            let fd = FiniteDiff { fault, ..FiniteDiff::default() };
            let r = run_suite::<f64>(preset, seed, &fd)?;
            (fd, r)
        }
        Precision::F32 => {
            if tol < F32_MIN_TOL {
                bail!("--tol {tol:e} is below what a 32-bit check can resolve (minimum {F32_MIN_TOL:e}); use --precision f64");
            }
            let fd = FiniteDiff { h: F32_STEP, fault, ..FiniteDiff::default() };
            let r = run_suite::<f32>(preset, seed, &fd)?;
            (fd, r)
        }
    };
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.report.max_rel_err <= tol;
        println!(
            "{:<16} max_rel_err {:.3e}  coords {:>5}  {}",
            r.name,
            r.report.max_rel_err,
            r.report.coords_checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {tol:e} (h = {:e})", results.len(), fd.h);
        Ok(true)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(false)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gradcheck {
            preset,
            seed,
            tol,
            precision,
            inject_fault,
        } => gradcheck(&preset, seed, tol, precision, inject_fault),
        Cmd::BenchAttn {
            sizes,
            win,
            channels,
            reps,
            out,
        } => {
            let shape = BenchShape {
                channels,
                inner: channels,
                ..BenchShape::default()
            };
            let (rows, notes) = bench_attn(&sizes, &win, shape, reps)?;
            for n in notes {
                eprintln!("note: {n}");
            }
            write_or_print(out.as_deref(), &bench_csv(&rows))?;
            Ok(true)
        }
        Cmd::TrainToy {
            config,
            seed,
            steps,
            no_tca,
            no_wp,
            out,
            loss_out,
        } => {
            let rc = read_config(config.as_deref())?;
            let model_cfg = ModelConfig::preset(rc.preset.as_deref().unwrap_or("toy"))?;
            let mut train = rc.train;
            train.seed = seed;
            if let Some(s) = steps {
                train.steps = s;
            }
            train.tca_enabled &= !no_tca;
            train.wp_enabled &= !no_wp;
            let r = train_toy(seed, &model_cfg, &rc.task, &train)?;
            checkpoint::save(&out, &r.model)?;
            let loss_path = loss_out.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".loss.csv");
                PathBuf::from(s)
            });
            std::fs::write(&loss_path, loss_csv(&r.losses))?;
            if let (Some(first), Some(last)) = (r.losses.first(), r.losses.last()) {
                eprintln!("trained {} steps: loss {first:.4} -> {last:.4}", r.losses.len());
            }
            Ok(true)
        }
        Cmd::Track {
            ckpt,
            frames,
            init,
            w,
            out,
        } => {
            let init = parse_init(&init)?;
            let model = checkpoint::load(&ckpt)?;
            let frames = read_frames(&frames)?;
            let mut params = model.cfg.tracker;
            if let Some(w) = w {
                if !(0.0..=1.0).contains(&w) {
                    bail!("--w must lie in [0, 1], got {w}");
                }
                params.window_weight = w;
            }
            let boxes = Tracker::with_params(&model, params).run(&frames, &init)?;
            write_boxes(&out, &boxes)?;
            Ok(true)
        }
        Cmd::DumpAttn {
            ckpt,
            frames,
            init,
            stage,
            out,
        } => {
            let init = parse_init(&init)?;
            let model = checkpoint::load(&ckpt)?;
            let frames = read_frames(&frames)?;
            let maps = dump_attention(&model, &frames, &init, stage)?;
            std::fs::create_dir_all(&out)?;
            for (t, m) in maps.iter().enumerate() {
                write_pnm(&out.join(format!("csa_s{stage}_{t:05}.pgm")), &m.csa)?;
                if let Some(tca) = &m.tca {
                    write_pnm(&out.join(format!("tca_s{stage}_{t:05}.pgm")), tca)?;
                }
            }
            Ok(true)
        }
        Cmd::Eval {
            ckpt,
            config,
            episodes,
            seed,
            distractors,
            out,
        } => {
            let mut task = read_config(config.as_deref())?.task;
            if let Some(k) = distractors {
                task.distractors = k;
            }
            let model = checkpoint::load(&ckpt)?;
            let rows = evaluate(&model, &task, &model.cfg.tracker, episodes, seed)?;
            write_or_print(out.as_deref(), &metrics_csv(&rows))?;
            Ok(true)
        }
        Cmd::GenSeq {
            config,
            seed,
            distractors,
            sigma,
            out,
        } => {
            let mut task = read_config(config.as_deref())?.task;
            if let Some(k) = distractors {
                task.distractors = k;
            }
            if let Some(s) = sigma {
                task.sigma = s;
            }
            let (frames, gt) = generate_sequence(&task, seed)?;
            std::fs::create_dir_all(&out)?;
            for (t, f) in frames.iter().enumerate() {
                write_pnm(&out.join(format!("{t:05}.pgm")), f)?;
            }
            write_boxes(&out.join("groundtruth.txt"), &gt)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
