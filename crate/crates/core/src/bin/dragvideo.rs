use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dragvideo::codec::read_frames;
use dragvideo::instruction::{DragInstruction, Point};
use dragvideo::metrics::{consistency_score, ReportRow};
use dragvideo::pipeline::preprocess::read_png_dir;
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};
use dragvideo::pipeline::{Mode, Models, Project, RunConfig, RunControl};
use dragvideo::service::{serve, ServiceConfig};
use dragvideo::{Error, Result};

#[derive(Parser)]
#[command(name = "dragvideo", version, about = "Drag-style video editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Video,
    PerFrame,
}

#[derive(Subcommand)]
enum Command {
    /// Resample and resize a directory of PNG frames into a project.
    Preprocess {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long)]
        kps: f64,
        #[arg(long)]
        max_side: Option<usize>,
        /// Seed for a newly created project.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune the sample-specific LoRA.
    TrainLora {
        #[arg(long)]
        project: PathBuf,
        /// RunConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Store an instruction and propagate it to every frame.
    Propagate {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        instruction: PathBuf,
    },
    /// Run (or resume) the edit.
    Drag {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score two frame directories and print the report CSV.
    Score {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long, default_value = "sample")]
        sample: String,
        #[arg(long, default_value_t = 8.0)]
        fps: f64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a synthetic project and run both the video edit and the per-frame baseline.
    DemoSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "DRAGVIDEO_DATA_ROOT", default_value = "data")]
        data_root: PathBuf,
        #[arg(long, env = "DRAGVIDEO_WORKERS", default_value_t = 1)]
        workers: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn open_or_create(root: &Path, seed: u64) -> Result<Project> {
    match Project::open(root) {
        Err(Error::NotFound(_)) => Project::create(root, seed),
        other => other,
    }
}

fn score_dir(dir: &Path, fps: f64, models: &Models) -> Result<f64> {
    consistency_score(&read_frames(dir, fps)?, models.flow.as_ref())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess {
            project,
            input,
            fps,
            kps,
            max_side,
            seed,
        } => {
            let source = read_png_dir(&input, fps)?;
            let mut p = open_or_create(&project, seed)?;
            p.preprocess(&source, kps, &input.display().to_string(), max_side)?;
            println!("{} frames at {}x{}", p.state.frames, p.state.width, p.state.height);
        }
        Command::TrainLora { project, config } => {
            let cfg = load_config(config.as_deref())?;
            let mut p = Project::open(&project)?;
            p.train_lora(&cfg, &RunControl::default())?;
            println!("lora stored in {}", p.path("lora").display());
        }
        Command::Propagate { project, instruction } => {
            let mut p = Project::open(&project)?;
            p.set_instruction(&DragInstruction::load(&instruction)?)?;
            let propagated = p.propagate(&Models::from_env())?;
            println!(
                "propagated to {} frames; overlays in {}",
                propagated.frames(),
                p.path("propagated/overlay").display()
            );
        }
        Command::Drag { project, config, mode } => {
            let mut cfg = load_config(config.as_deref())?;
            match mode {
                Some(ModeArg::Video) => cfg.mode = Mode::Video,
                Some(ModeArg::PerFrame) => cfg.mode = Mode::PerFrameBaseline,
                None => {}
            }
            let mut p = Project::open(&project)?;
            let out = p.run(&cfg, &Models::from_env(), &RunControl::default())?;
            for (i, path) in out.paths.iter().enumerate() {
                println!("path {i}: {} drag iterations", path.drag_iterations);
            }
            println!("report written to {}", p.path("report.csv").display());
        }
        Command::Score {
            baseline,
            edited,
            sample,
            fps,
            out,
        } => {
            let models = Models::from_env();
            let row = ReportRow {
                sample,
                baseline_score: Some(score_dir(&baseline, fps, &models)?),
                dragvideo_score: Some(score_dir(&edited, fps, &models)?),
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.serialize(&row).map_err(|e| Error::Metric(e.to_string()))?;
            let text = String::from_utf8(w.into_inner().map_err(|e| Error::Metric(e.to_string()))?)
                .map_err(|e| Error::Metric(e.to_string()))?;
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::DemoSynthetic {
            out,
            frames,
            size,
            epochs,
            seed,
        } => demo(&out, frames, size, epochs, seed)?,
        Command::Serve {
            addr,
            data_root,
            workers,
        } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("runtime"), e))?;
            rt.block_on(serve(addr, ServiceConfig { data_root, workers }))?;
        }
    }
    Ok(())
}

fn demo(out: &Path, frames: usize, size: usize, epochs: usize, seed: u64) -> Result<()> {
    let s = size as f64;
    let center = Point::new(0.4 * s, 0.5 * s);
    let video = gaussian_blob_video(frames, size, size, center, s / 10.0, (0.5, 0.0))?;
    let mut p = open_or_create(out, seed)?;
    if p.state.frames == 0 {
        p.preprocess(&video, video.fps(), "synthetic blob", None)?;
        p.set_instruction(&single_drag_instruction(frames, center, (s / 8.0, 0.0), 2))?;
    }
    let models = Models::desk();
    if p.propagated().is_err() {
        p.propagate(&models)?;
    }
    let mut cfg = RunConfig::default();
    cfg.lora.epochs = epochs;
    let control = RunControl::default();
    let edit = p.run(&cfg, &models, &control)?;
    println!("video edit: {} drag iterations", edit.paths[0].drag_iterations);
    cfg.mode = Mode::PerFrameBaseline;
    let baseline = p.run(&cfg, &models, &control)?;
    println!(
        "per-frame baseline: {} drag iterations in total",
        baseline.paths.iter().map(|x| x.drag_iterations).sum::<usize>()
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    println!(
        "consistency: baseline {} dragvideo {} ({})",
        fmt(baseline.report.baseline_score),
        fmt(baseline.report.dragvideo_score),
        p.path("report.csv").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
