//! Project lifecycle and the end-to-end editing flow.
//!
//! A project is a directory:
//!
//! ```text
//! frames/            preprocessed frames, frame_%05d.png
//! latents/           z0.bin + z0.json
//! lora/              weights.bin + manifest.json + trace.json
//! trajectory/        step_NNN.bin + step_NNN.json
//! instruction.json   the raw drag instruction
//! propagated/        instruction.json + overlay/ preview frames
//! audit.jsonl        one line per drag iteration
//! result/            edited and original latents and frames
//! baseline/          the per-frame baseline, one sub-project layout per frame
//! report.csv         consistency scores
//! state.json         ProjectState
//! ```
//!
//! Every stage persists its output and records a hash of everything it depends
//! on. A rerun skips stages whose recorded hash still matches and reads their
//! output back from disk, so a resumed run sees exactly the bytes an
//! uninterrupted run would have seen.

pub mod preprocess;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{load_latent, read_frames, save_latent, write_frames, Codec, LatentVideo, ToyCodec, VideoFrames};
use crate::ddim::{Ddim, InversionTrajectory};
use crate::dove::{read_audit, write_audit, DragContext, OptimizationConfig};
use crate::error::{Error, Result};
use crate::instruction::{
    propagate_instruction, render_overlay, CorrelationTracker, DragInstruction, FloodFillSegmenter,
    HandleShiftMaskTracker, MaskTracker, MaskVideo, Point, PointTracker, PropagatedInstruction, PropagationModels,
    Segmenter,
};
use crate::lora::{train_lora, LoraTrainConfig, LoraWeights, TrainTrace};
use crate::metrics::{
    consistency_score, write_report_csv, write_report_json, BlockMatchingFlow, FlowEstimator, ReportRow,
};
use crate::msa::{denoise_pair, MsaPlan, StepLatent};
use crate::remote::{Endpoint, RemoteFlow, RemotePointTracker, RemoteSegmenter};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::unet::{Backbone, BackboneConfig, ConditioningEmbedding, ForwardOptions, ToyVideoUnet};
use crate::util::{config_hash, hash_chunks};

/// Frame sides are rounded to this multiple: the codec factor times the
/// default backbone's total downsampling.
pub const FRAME_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Created,
    Preprocessed,
    LoraTrained,
    Instructed,
    Propagated,
    Dragging,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Video,
    /// Every frame edited as an independent one-frame video with the motion modules off.
    PerFrameBaseline,
}

/// Everything that shapes an editing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub optimization: OptimizationConfig,
    pub lora: LoraTrainConfig,
    pub msa: MsaPlan,
    pub lora_enabled: bool,
    pub msa_enabled: bool,
    pub mode: Mode,
    pub backbone: BackboneConfig,
    /// Directory holding saved backbone weights; overrides `backbone` when set.
    pub backbone_weights: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub inversion_refinement: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimization: OptimizationConfig::default(),
            lora: LoraTrainConfig::default(),
            msa: MsaPlan::default(),
            lora_enabled: true,
            msa_enabled: true,
            mode: Mode::Video,
            backbone: BackboneConfig::default(),
            backbone_weights: None,
            schedule: ScheduleConfig::default(),
            inversion_refinement: 2,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimization.validate()?;
        self.lora.validate()?;
        self.backbone.validate()?;
        NoiseSchedule::new(self.schedule.clone())?.check_step(self.optimization.t_opt)?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// The error shape reported to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub stage: Option<String>,
    pub message: String,
}

impl From<&Error> for ErrorEnvelope {
    fn from(e: &Error) -> Self {
        Self {
            code: e.code().to_string(),
            stage: e.stage().map(str::to_string),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub id: String,
    pub seed: u64,
    pub source: Option<String>,
    pub kps: Option<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub status: Status,
    /// Completed stages and the hash of their inputs.
    pub stages: BTreeMap<String, String>,
    /// Configuration of the current or last run.
    pub config: Option<RunConfig>,
    pub error: Option<ErrorEnvelope>,
}

/// Shared flag checked at stage boundaries.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub cancel: CancelToken,
    /// Stop (as if cancelled) right after the named stage completes.
    pub stop_after: Option<String>,
}

impl RunControl {
    fn checkpoint(&self, finished: &str) -> Result<()> {
        if self.stop_after.as_deref() == Some(finished) || self.cancel.is_cancelled() {
            return Err(Error::Cancelled(finished.to_string()));
        }
        Ok(())
    }
}

/// Tracker, segmenter and flow models used by propagation and scoring.
pub struct Models {
    pub segmenter: Box<dyn Segmenter>,
    pub point_tracker: Box<dyn PointTracker>,
    pub mask_tracker: Box<dyn MaskTracker>,
    pub flow: Box<dyn FlowEstimator>,
    pub keyframe_blend: bool,
}

impl Models {
    /// Dependency-free desk-scale models.
    pub fn desk() -> Self {
        Self {
            segmenter: Box::new(FloodFillSegmenter::default()),
            point_tracker: Box::new(CorrelationTracker::default()),
            mask_tracker: Box::new(HandleShiftMaskTracker),
            flow: Box::new(BlockMatchingFlow::default()),
            keyframe_blend: true,
        }
    }

    /// Desk-scale models, with each one replaced by a remote client when its
    /// endpoint variable (`DRAGVIDEO_TRACKER_URL`, `DRAGVIDEO_SEGMENTER_URL`,
    /// `DRAGVIDEO_FLOW_URL`) is set. `DRAGVIDEO_REMOTE_TIMEOUT_MS` sets the timeout.
    pub fn from_env() -> Self {
        let mut m = Self::desk();
        let timeout = std::env::var("DRAGVIDEO_REMOTE_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(30_000);
        let endpoint = |var: &str| {
            std::env::var(var).ok().filter(|u| !u.is_empty()).map(|url| Endpoint {
                url,
                timeout_ms: timeout,
            })
        };
        if let Some(e) = endpoint("DRAGVIDEO_TRACKER_URL") {
            m.point_tracker = Box::new(RemotePointTracker(e));
        }
        if let Some(e) = endpoint("DRAGVIDEO_SEGMENTER_URL") {
            m.segmenter = Box::new(RemoteSegmenter(e));
        }
        if let Some(e) = endpoint("DRAGVIDEO_FLOW_URL") {
            m.flow = Box::new(RemoteFlow(e));
        }
        m
    }

    fn propagation(&self) -> PropagationModels<'_> {
        PropagationModels {
            segmenter: self.segmenter.as_ref(),
            point_tracker: self.point_tracker.as_ref(),
            mask_tracker: self.mask_tracker.as_ref(),
            keyframe_blend: self.keyframe_blend,
        }
    }
}

/// Outputs of one editing path (the whole video, or one baseline frame).
#[derive(Debug, Clone)]
pub struct PathOutput {
    pub original: LatentVideo,
    pub edited: LatentVideo,
    pub drag_iterations: usize,
    pub final_handles: Vec<Vec<Point>>,
    pub lora_trace: Option<TrainTrace>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub original: VideoFrames,
    pub edited: VideoFrames,
    /// One entry per path: a single one in video mode, one per frame otherwise.
    pub paths: Vec<PathOutput>,
    pub report: ReportRow,
}

#[derive(Debug, Serialize, Deserialize)]
struct DragSummary {
    iterations: usize,
    final_handles: Vec<Vec<Point>>,
}

/// Where one path keeps its artifacts and how its stages are keyed.
struct PathLayout {
    key: String,
    lora: PathBuf,
    trajectory: PathBuf,
    audit: PathBuf,
    result: PathBuf,
    seed: u64,
    per_frame: bool,
}

impl PathLayout {
    fn stage(&self, name: &str) -> String {
        format!("{}{name}", self.key)
    }
}

struct Engine {
    backbone: ToyVideoUnet,
    backbone_hash: String,
    schedule: NoiseSchedule,
    cond: ConditioningEmbedding,
}

impl Engine {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let (backbone, backbone_hash) = match &cfg.backbone_weights {
            Some(dir) => {
                let bin = dir.join("weights.bin");
                let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
                (ToyVideoUnet::load(dir)?, hash_chunks([bytes.as_slice()]))
            }
            None => (ToyVideoUnet::new(cfg.backbone.clone())?, config_hash(&cfg.backbone)?),
        };
        Ok(Self {
            backbone,
            backbone_hash,
            schedule: NoiseSchedule::new(cfg.schedule.clone())?,
            cond: ConditioningEmbedding::null(),
        })
    }
}

fn remove_path(path: &Path) -> Result<()> {
    let res = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        Ok(())
    };
    res.map_err(|e| Error::io(path, e))
}

fn latent_hash(z: &LatentVideo) -> Result<String> {
    let bytes: Vec<u8> = z.to_vec()?.into_iter().flat_map(f64::to_le_bytes).collect();
    Ok(hash_chunks([bytes.as_slice()]))
}

/// A project directory plus its state.
pub struct Project {
    root: PathBuf,
    pub state: ProjectState,
}

impl Project {
    /// Creates `root` and an empty project in it.
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        let id = root
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("{} has no usable directory name", root.display())))?
            .to_string();
        if root.join("state.json").exists() {
            return Err(Error::Config(format!("project {id} already exists")));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let project = Self {
            root: root.to_path_buf(),
            state: ProjectState {
                id,
                seed,
                source: None,
                kps: None,
                frames: 0,
                height: 0,
                width: 0,
                status: Status::Created,
                stages: BTreeMap::new(),
                config: None,
                error: None,
            },
        };
        project.save()?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no project at {}", root.display())),
            _ => Error::io(&path, e),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            state: serde_json::from_str(&text)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path("state.json");
        let tmp = self.path("state.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.state)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn derived_status(&self) -> Status {
        if self.state.frames == 0 {
            return Status::Created;
        }
        let mut s = Status::Preprocessed;
        if self.state.stages.contains_key("lora") {
            s = Status::LoraTrained;
        }
        if self.path("instruction.json").exists() {
            s = Status::Instructed;
            if self.path("propagated/instruction.json").exists() {
                s = Status::Propagated;
            }
        }
        s
    }

    fn refresh_status(&mut self) -> Result<()> {
        self.state.status = self.derived_status();
        self.state.error = None;
        self.save()
    }

    fn require(&self, stage: &str, needed: Status) -> Result<()> {
        let reached = match self.state.status {
            Status::Dragging | Status::Done | Status::Failed => self.derived_status(),
            s => s,
        };
        if reached < needed {
            return Err(Error::Ordering {
                stage: stage.to_string(),
                message: format!("project is {:?}, needs {:?}", reached, needed).to_lowercase(),
            });
        }
        Ok(())
    }

    /// Resamples `source` to `kps`, resizes it to codec-friendly sides, stores the
    /// frames and their latent, and discards everything derived from older frames.
    pub fn preprocess(
        &mut self,
        source: &VideoFrames,
        kps: f64,
        source_name: &str,
        max_side: Option<usize>,
    ) -> Result<()> {
        if self.state.status == Status::Dragging {
            return Err(Error::Busy("a run is in progress".into()));
        }
        let video = preprocess::resample(source, kps)?;
        let video = preprocess::resize_divisible(&video, FRAME_MULTIPLE, max_side)?;
        for stale in [
            "frames",
            "latents",
            "lora",
            "trajectory",
            "instruction.json",
            "propagated",
            "audit.jsonl",
            "result",
            "baseline",
            "report.csv",
        ] {
            remove_path(&self.path(stale))?;
        }
        write_frames(&self.path("frames"), &video)?;
        let z0 = ToyCodec.encode(&video)?;
        save_latent(&self.path("latents/z0"), &z0)?;
        self.state.source = Some(source_name.to_string());
        self.state.kps = Some(kps);
        self.state.frames = video.frames();
        self.state.height = video.height();
        self.state.width = video.width();
        self.state.stages.clear();
        self.state.config = None;
        self.refresh_status()
    }

    pub fn video(&self) -> Result<VideoFrames> {
        let kps = self.state.kps.ok_or_else(|| Error::Ordering {
            stage: "load".into(),
            message: "project has not been preprocessed".into(),
        })?;
        read_frames(&self.path("frames"), kps)
    }

    pub fn latent(&self) -> Result<LatentVideo> {
        load_latent(&self.path("latents/z0"))
    }

    fn video_layout(&self) -> PathLayout {
        PathLayout {
            key: String::new(),
            lora: self.path("lora"),
            trajectory: self.path("trajectory"),
            audit: self.path("audit.jsonl"),
            result: self.path("result"),
            seed: self.state.seed,
            per_frame: false,
        }
    }

    fn baseline_layout(&self, frame: usize) -> PathLayout {
        let dir = self.path(&format!("baseline/frame_{frame:03}"));
        PathLayout {
            key: format!("baseline/frame_{frame:03}/"),
            lora: dir.join("lora"),
            trajectory: dir.join("trajectory"),
            audit: dir.join("audit.jsonl"),
            result: dir.join("result"),
            seed: self.state.seed.wrapping_add(frame as u64),
            per_frame: true,
        }
    }

    fn record(&mut self, stage: String, hash: String) -> Result<()> {
        self.state.stages.insert(stage, hash);
        self.save()
    }

    /// Trains (or reloads) the project LoRA. Returns `None` when disabled.
    pub fn train_lora(&mut self, cfg: &RunConfig, control: &RunControl) -> Result<Option<LoraWeights>> {
        self.require("train_lora", Status::Preprocessed)?;
        cfg.validate()?;
        let engine = Engine::new(cfg)?;
        let z0 = self.latent()?;
        let layout = self.video_layout();
        let (weights, _, _) = self
            .lora_stage(&engine, &layout, &z0, cfg, control)
            .map_err(|e| e.in_stage("lora"))?;
        if !matches!(self.state.status, Status::Dragging) {
            self.refresh_status()?;
        }
        Ok(weights)
    }

    fn lora_stage(
        &mut self,
        engine: &Engine,
        layout: &PathLayout,
        z0: &LatentVideo,
        cfg: &RunConfig,
        control: &RunControl,
    ) -> Result<(Option<LoraWeights>, String, Option<TrainTrace>)> {
        let lora_cfg = LoraTrainConfig {
            seed: layout.seed,
            ..cfg.lora.clone()
        };
        let hash = config_hash(&serde_json::json!({
            "lora": lora_cfg,
            "enabled": cfg.lora_enabled,
            "backbone": engine.backbone_hash,
            "schedule": cfg.schedule,
            "latent": latent_hash(z0)?,
            "per_frame": layout.per_frame,
        }))?;
        let stage = layout.stage("lora");
        if !cfg.lora_enabled {
            if self.state.stages.get(&stage) != Some(&hash) {
                self.record(stage.clone(), hash.clone())?;
                control.checkpoint(&stage)?;
            }
            return Ok((None, hash, None));
        }
        let cached = self.state.stages.get(&stage) == Some(&hash)
            && LoraWeights::load(&layout.lora).is_ok_and(|(_, h)| h == hash);
        if !cached {
            let weights = LoraWeights::inject(&engine.backbone.lora_targets(), lora_cfg.rank, lora_cfg.seed)?;
            let trace = train_lora(
                &engine.backbone,
                z0,
                &engine.schedule,
                &lora_cfg,
                &engine.cond,
                &weights,
                layout.per_frame,
            )?;
            weights.save(&layout.lora, &hash)?;
            let trace_path = layout.lora.join("trace.json");
            fs::write(&trace_path, serde_json::to_vec_pretty(&trace)?).map_err(|e| Error::io(&trace_path, e))?;
            self.record(stage.clone(), hash.clone())?;
            control.checkpoint(&stage)?;
        }
        let (weights, _) = LoraWeights::load(&layout.lora)?;
        let trace_path = layout.lora.join("trace.json");
        let trace = fs::read(&trace_path)
            .ok()
            .and_then(|b| serde_json::from_slice::<TrainTrace>(&b).ok());
        Ok((Some(weights), hash, trace))
    }

    pub fn set_instruction(&mut self, instruction: &DragInstruction) -> Result<()> {
        self.require("instruction", Status::Preprocessed)?;
        if self.state.status == Status::Dragging {
            return Err(Error::Busy("a run is in progress".into()));
        }
        instruction.validate(&self.video()?)?;
        instruction.save(&self.path("instruction.json"))?;
        remove_path(&self.path("propagated"))?;
        self.refresh_status()
    }

    pub fn instruction(&self) -> Result<DragInstruction> {
        let path = self.path("instruction.json");
        if !path.exists() {
            return Err(Error::NotFound("no instruction has been set".into()));
        }
        DragInstruction::load(&path)
    }

    /// Propagates the stored instruction to every frame and renders preview overlays.
    pub fn propagate(&mut self, models: &Models) -> Result<PropagatedInstruction> {
        self.require("propagate", Status::Instructed)?;
        if self.state.status == Status::Dragging {
            return Err(Error::Busy("a run is in progress".into()));
        }
        let video = self.video()?;
        let instruction = self.instruction()?;
        let propagated = propagate_instruction(&video, &instruction, models.propagation(), ToyCodec.scale_factor())
            .map_err(|e| e.in_stage("propagate"))?;
        remove_path(&self.path("propagated"))?;
        propagated.save(&self.path("propagated/instruction.json"))?;
        write_frames(&self.path("propagated/overlay"), &render_overlay(&video, &propagated)?)?;
        self.refresh_status()?;
        Ok(propagated)
    }

    pub fn propagated(&self) -> Result<PropagatedInstruction> {
        let path = self.path("propagated/instruction.json");
        if !path.exists() {
            return Err(Error::Ordering {
                stage: "run".into(),
                message: "the instruction has not been propagated".into(),
            });
        }
        PropagatedInstruction::load(&path)
    }

    fn run_path(
        &mut self,
        engine: &Engine,
        layout: &PathLayout,
        z0: &LatentVideo,
        instruction: &PropagatedInstruction,
        cfg: &RunConfig,
        control: &RunControl,
    ) -> Result<PathOutput> {
        let (lora, lora_hash, lora_trace) = self
            .lora_stage(engine, layout, z0, cfg, control)
            .map_err(|e| e.in_stage(&layout.stage("lora")))?;
        let opts = ForwardOptions {
            per_frame: layout.per_frame,
            ..ForwardOptions::with_lora(lora.as_ref())
        };
        let ddim = Ddim::new(&engine.backbone, &engine.schedule, &engine.cond)
            .with_inversion_refinement(cfg.inversion_refinement);
        let t_opt = cfg.optimization.t_opt;

        let stage = layout.stage("invert");
        let invert_hash = config_hash(&serde_json::json!({
            "lora": lora_hash,
            "t_opt": t_opt,
            "refinement": cfg.inversion_refinement,
        }))?;
        if self.state.stages.get(&stage) != Some(&invert_hash) {
            let run = || -> Result<()> {
                remove_path(&layout.trajectory)?;
                ddim.invert(z0, t_opt, &opts)?.save(&layout.trajectory)
            };
            run().map_err(|e| e.in_stage(&stage))?;
            self.record(stage.clone(), invert_hash.clone())?;
            control.checkpoint(&stage)?;
        }
        let trajectory = InversionTrajectory::load(&layout.trajectory).map_err(|e| e.in_stage(&stage))?;

        let stage = layout.stage("drag");
        let instruction_bytes = serde_json::to_vec(&(&instruction.handles, &instruction.targets))?;
        let mask_bytes: Vec<u8> = instruction
            .mask
            .masks
            .iter()
            .flat_map(|m| (0..m.height()).flat_map(move |y| (0..m.width()).map(move |x| m.get(y, x) as u8)))
            .collect();
        let drag_hash = config_hash(&serde_json::json!({
            "invert": invert_hash,
            "instruction": hash_chunks([instruction_bytes.as_slice(), mask_bytes.as_slice()]),
            "optimization": cfg.optimization,
        }))?;
        let edited_noisy = layout.result.join("edited_noisy");
        let summary_path = layout.result.join("drag.json");
        if self.state.stages.get(&stage) != Some(&drag_hash) {
            let run = || -> Result<()> {
                let ctx = DragContext {
                    ddim,
                    opts,
                    feature_layer: engine.backbone.default_feature_layer(),
                    cfg: &cfg.optimization,
                };
                let out = ctx.run_drag(&trajectory, instruction)?;
                save_latent(&edited_noisy, &out.latent)?;
                write_audit(&layout.audit, &out.audit)?;
                let summary = DragSummary {
                    iterations: out.iterations,
                    final_handles: out.final_handles,
                };
                fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&summary_path, e))
            };
            run().map_err(|e| e.in_stage(&stage))?;
            self.record(stage.clone(), drag_hash.clone())?;
            control.checkpoint(&stage)?;
        }
        let z_hat = load_latent(&edited_noisy).map_err(|e| e.in_stage(&stage))?;
        let summary: DragSummary =
            serde_json::from_slice(&fs::read(&summary_path).map_err(|e| Error::io(&summary_path, e))?)?;

        let stage = layout.stage("denoise");
        let plan = if cfg.msa_enabled {
            cfg.msa.clone()
        } else {
            MsaPlan::disabled()
        };
        let denoise_hash = config_hash(&serde_json::json!({"drag": drag_hash, "msa": plan}))?;
        let original_stem = layout.result.join("original_latent");
        let edited_stem = layout.result.join("edited_latent");
        if self.state.stages.get(&stage) != Some(&denoise_hash) {
            let run = || -> Result<()> {
                let pair = denoise_pair(
                    &ddim,
                    &StepLatent {
                        step: t_opt,
                        latent: trajectory.get(t_opt)?.clone(),
                    },
                    &StepLatent {
                        step: t_opt,
                        latent: z_hat.clone(),
                    },
                    &plan,
                    &opts,
                )?;
                save_latent(&original_stem, &pair.original)?;
                save_latent(&edited_stem, &pair.edited)
            };
            run().map_err(|e| e.in_stage(&stage))?;
            self.record(stage.clone(), denoise_hash)?;
            control.checkpoint(&stage)?;
        }
        Ok(PathOutput {
            original: load_latent(&original_stem)?,
            edited: load_latent(&edited_stem)?,
            drag_iterations: summary.iterations,
            final_handles: summary.final_handles,
            lora_trace,
        })
    }

    /// Runs the editing flow for `cfg.mode`, resuming from the last completed stage.
    pub fn run(&mut self, cfg: &RunConfig, models: &Models, control: &RunControl) -> Result<RunOutcome> {
        self.require("run", Status::Propagated)?;
        cfg.validate()?;
        if self.state.status == Status::Dragging && self.state.config.as_ref().is_some_and(|c| c != cfg) {
            return Err(Error::Busy(
                "an interrupted run with a different configuration must be reset first".into(),
            ));
        }
        self.state.config = Some(cfg.clone());
        self.state.status = Status::Dragging;
        self.state.error = None;
        self.save()?;
        match self.run_inner(cfg, models, control) {
            Ok(out) => {
                self.state.status = Status::Done;
                self.save()?;
                Ok(out)
            }
            Err(e @ Error::Cancelled(_)) => Err(e),
            Err(e) => {
                self.state.status = Status::Failed;
                self.state.error = Some(ErrorEnvelope::from(&e));
                self.save()?;
                Err(e)
            }
        }
    }

    /// Forgets an interrupted run so a different configuration may start.
    pub fn reset_run(&mut self) -> Result<()> {
        self.state.config = None;
        self.refresh_status()
    }

    fn run_inner(&mut self, cfg: &RunConfig, models: &Models, control: &RunControl) -> Result<RunOutcome> {
        let instruction = self.propagated()?;
        let engine = Engine::new(cfg)?;
        let z0 = self.latent()?;
        let fps = self.state.kps.unwrap_or(8.0);
        let (paths, result_dir) = match cfg.mode {
            Mode::Video => {
                let layout = self.video_layout();
                (
                    vec![self.run_path(&engine, &layout, &z0, &instruction, cfg, control)?],
                    self.path("result"),
                )
            }
            Mode::PerFrameBaseline => {
                let mut paths = Vec::with_capacity(z0.frames());
                for i in 0..z0.frames() {
                    let layout = self.baseline_layout(i);
                    let frame = instruction_frame(&instruction, i)?;
                    paths.push(self.run_path(&engine, &layout, &z0.narrow_frames(i, 1)?, &frame, cfg, control)?);
                }
                (paths, self.path("baseline/result"))
            }
        };
        let original = LatentVideo::concat_frames(&paths.iter().map(|p| p.original.clone()).collect::<Vec<_>>())?;
        let edited = LatentVideo::concat_frames(&paths.iter().map(|p| p.edited.clone()).collect::<Vec<_>>())?;
        let stage = "decode";
        let decode = || -> Result<(VideoFrames, VideoFrames)> {
            let original = ToyCodec.decode(&original, fps)?;
            let edited = ToyCodec.decode(&edited, fps)?;
            remove_path(&result_dir.join("original"))?;
            remove_path(&result_dir.join("edited"))?;
            write_frames(&result_dir.join("original"), &original)?;
            write_frames(&result_dir.join("edited"), &edited)?;
            Ok((original, edited))
        };
        let (original, edited) = decode().map_err(|e| e.in_stage(stage))?;
        let report = self.write_report(models).map_err(|e| e.in_stage("report"))?;
        Ok(RunOutcome {
            original,
            edited,
            paths,
            report,
        })
    }

    /// Scores whichever of the video-mode and baseline results exist and writes
    /// `report.csv` plus `result/report.json`.
    pub fn write_report(&self, models: &Models) -> Result<ReportRow> {
        let fps = self.state.kps.unwrap_or(8.0);
        let score = |dir: PathBuf| -> Result<Option<f64>> {
            if !dir.exists() {
                return Ok(None);
            }
            let video = read_frames(&dir, fps)?;
            if video.frames() < 2 {
                return Ok(None);
            }
            consistency_score(&video, models.flow.as_ref()).map(Some)
        };
        let row = ReportRow {
            sample: self.state.id.clone(),
            baseline_score: score(self.path("baseline/result/edited"))?,
            dragvideo_score: score(self.path("result/edited"))?,
        };
        write_report_csv(&self.path("report.csv"), std::slice::from_ref(&row))?;
        fs::create_dir_all(self.path("result")).map_err(|e| Error::io(self.path("result"), e))?;
        write_report_json(&self.path("result/report.json"), std::slice::from_ref(&row))?;
        Ok(row)
    }

    pub fn audit(&self) -> Result<Vec<crate::dove::AuditRecord>> {
        read_audit(&self.path("audit.jsonl"))
    }
}

/// The single-frame slice of a propagated instruction.
pub fn instruction_frame(p: &PropagatedInstruction, i: usize) -> Result<PropagatedInstruction> {
    if i >= p.frames() {
        return Err(Error::Domain(format!("frame {i} out of range")));
    }
    Ok(PropagatedInstruction {
        handles: vec![p.handles[i].clone()],
        targets: vec![p.targets[i].clone()],
        mask: MaskVideo::new(vec![p.mask.masks[i].clone()], p.mask.scale_factor)?,
    })
}
