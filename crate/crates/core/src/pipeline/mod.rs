//! Orchestration: the per-frame execution loop, ablation configurations,
//! dataset sources and run artifacts.

mod synthetic;
mod train;
mod tum;

pub use synthetic::{generate_synthetic_sequence, parse_synthetic_spec, Motion, Scene, SyntheticSpec};
pub use train::{compute_gradients, training_iteration, ParamGradients, Sgd, TrainConfig, TrainingClip};
pub use tum::{load_tum_sequence, load_tum_sequence_with_window};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backend::{share_cache, should_trigger, BackendConfig, FullAttentionRefiner, Refiner};
use crate::error::{ensure, Error, Result};
use crate::eval::{timing_summary, Clock, EvalReport, MonotonicClock, Stage, TimedPose, TimingLog, TimingReport};
use crate::frontend::{detect_keyframe, initialize_map, track_and_map, FrontendConfig, TokenMapState};
use crate::geometry::{Point3, SE3Pose};
use crate::io::{fuse_pointcloud, parse_key_values, write_ply, write_trajectory, ColoredPoint, CONFIDENCE_THRESHOLD};
use crate::losses::{FrameTarget, LossConfig, LossReport};
use crate::model::{FramePrediction, ImageFrame, ModelConfig, SlamFormer};
use crate::tensor::Tape;

/// Which backend passes run: none, end only, mid-run only, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    FOnly,
    FEb,
    FMb,
    #[default]
    FMbEb,
}

impl Ablation {
    /// `(run_mid, run_end)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::FOnly => (false, false),
            Self::FEb => (false, true),
            Self::FMb => (true, false),
            Self::FMbEb => (true, true),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FOnly => "f",
            Self::FEb => "f+eb",
            Self::FMb => "f+mb",
            Self::FMbEb => "f+mb+eb",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "f" => Self::FOnly,
            "f+eb" => Self::FEb,
            "f+mb" => Self::FMb,
            "f+mb+eb" => Self::FMbEb,
            _ => return Err(Error::Config(format!("unknown ablation {s:?}; expected f, f+eb, f+mb or f+mb+eb"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ablation: Ablation,
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub confidence_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_ablation(Ablation::default())
    }
}

impl PipelineConfig {
    pub fn with_ablation(ablation: Ablation) -> Self {
        let mut cfg = Self {
            ablation,
            frontend: FrontendConfig::default(),
            backend: BackendConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            confidence_threshold: CONFIDENCE_THRESHOLD,
        };
        cfg.set_ablation(ablation);
        cfg
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.ablation = ablation;
        (self.backend.run_mid, self.backend.run_end) = ablation.flags();
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (self.backend.run_mid, self.backend.run_end) == self.ablation.flags(),
            Config,
            "backend flags disagree with ablation {}",
            self.ablation.as_str()
        );
        self.frontend.validate()?;
        self.backend.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        ensure!(self.confidence_threshold.is_finite(), Config, "confidence threshold must be finite");
        Ok(())
    }

    /// Apply flat `key = value` settings. Unknown keys are errors.
    pub fn apply_key_values(&mut self, text: &str) -> Result<()> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        fn flag(k: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{k}: expected a boolean, got {v:?}"))),
            }
        }
        for (k, v) in parse_key_values(text)? {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "ablation" => self.set_ablation(v.parse()?),
                "tau" => self.frontend.tau = num(k, v)?,
                "max_frames" => self.frontend.max_frames = Some(num(k, v)?),
                "period" | "trigger_period" => self.backend.trigger_period = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "output_dir" => self.output_dir = PathBuf::from(v),
                "confidence_threshold" => self.confidence_threshold = num(k, v)?,
                "layers" => self.model.layers = num(k, v)?,
                "d_model" => self.model.d_model = num(k, v)?,
                "heads" => self.model.heads = num(k, v)?,
                "patch" => self.model.patch = num(k, v)?,
                "registers" => self.model.registers = num(k, v)?,
                "height" => self.model.image_hw.0 = num(k, v)?,
                "width" => self.model.image_hw.1 = num(k, v)?,
                "token_type_embedding" => self.model.token_type_embedding = flag(k, v)?,
                "lambda" => self.loss.lambda = num(k, v)?,
                "beta" => self.loss.beta = num(k, v)?,
                "alpha" => self.loss.alpha = num(k, v)?,
                "epsilon_huber" => self.loss.epsilon_huber = num(k, v)?,
                "learning_rate" => self.train.learning_rate = num(k, v)?,
                "momentum" => self.train.momentum = num(k, v)?,
                "grad_clip" => self.train.grad_clip = num(k, v)?,
                "freeze_pose_head" => self.train.freeze_pose_head = flag(k, v)?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    TumRgbd,
    Synthetic,
}

/// Pinhole intrinsics in pixels at the stored image resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Camera-local point seen at pixel `(u, v)` with depth `z`, through the
    /// pixel centre.
    pub fn unproject(&self, u: usize, v: usize, z: f64) -> Point3 {
        [(u as f64 + 0.5 - self.cx) / self.fx * z, (v as f64 + 0.5 - self.cy) / self.fy * z, z]
    }
}

#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub kind: SourceKind,
    pub frames: Vec<ImageFrame>,
    /// Camera-to-world, one per frame.
    pub gt_poses: Option<Vec<SE3Pose>>,
    /// Metric depth per pixel, 0 where invalid.
    pub gt_depth: Option<Vec<Vec<f64>>>,
    pub intrinsics: Option<Intrinsics>,
    /// Frames discarded for lack of a ground-truth association.
    pub dropped_frames: usize,
}

impl SequenceSource {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames.windows(2).all(|w| w[0].timestamp < w[1].timestamp),
            Ordering,
            "frame timestamps must increase strictly"
        );
        if let Some(p) = &self.gt_poses {
            ensure!(p.len() == self.frames.len(), Dimension, "{} gt poses for {} frames", p.len(), self.frames.len());
        }
        if let Some(d) = &self.gt_depth {
            ensure!(d.len() == self.frames.len(), Dimension, "{} gt depth maps for {} frames", d.len(), self.frames.len());
        }
        Ok(())
    }

    /// Ground-truth trajectory with frame timestamps.
    pub fn gt_trajectory(&self) -> Option<Vec<TimedPose>> {
        let poses = self.gt_poses.as_ref()?;
        Some(self.frames.iter().zip(poses).map(|(f, &pose)| TimedPose { timestamp: f.timestamp, pose }).collect())
    }

    /// Training/eval targets for frames `range`; needs poses, depth and
    /// intrinsics.
    pub fn targets(&self, range: std::ops::Range<usize>) -> Result<Vec<FrameTarget>> {
        let (Some(poses), Some(depth), Some(k)) = (&self.gt_poses, &self.gt_depth, &self.intrinsics) else {
            return Err(Error::Contract("ground-truth poses, depth and intrinsics are required".into()));
        };
        ensure!(range.end <= self.frames.len(), Bounds, "frame range {:?} of {}", range, self.frames.len());
        range
            .map(|i| {
                let f = &self.frames[i];
                let d = &depth[i];
                ensure!(d.len() == f.height * f.width, Dimension, "depth map {} does not match the image", i);
                let pts = (0..d.len()).map(|px| k.unproject(px % f.width, px / f.width, d[px])).collect();
                FrameTarget::new(f.height, f.width, d.clone(), pts, poses[i])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackendCalls {
    pub mid: usize,
    pub end: usize,
}

impl BackendCalls {
    pub fn total(&self) -> usize {
        self.mid + self.end
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// One pose per keyframe, relative to the first keyframe.
    pub trajectory: Vec<TimedPose>,
    pub keyframes: Vec<usize>,
    pub predictions: Vec<FramePrediction>,
    pub pointcloud: Vec<ColoredPoint>,
    pub timing_log: TimingLog,
    pub timing: TimingReport,
    pub backend_calls: BackendCalls,
    pub loss_log: Option<Vec<LossReport>>,
}

impl RunArtifacts {
    pub fn points(&self) -> Vec<Point3> {
        self.pointcloud.iter().map(ColoredPoint::point).collect()
    }

    /// `trajectory.txt`, `pointcloud.ply`, `report.txt` and `report.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_trajectory(&self.trajectory, &dir.join("trajectory.txt"))?;
        write_ply(&self.pointcloud, std::io::BufWriter::new(std::fs::File::create(dir.join("pointcloud.ply"))?))?;
        let report = EvalReport { timing: Some(self.timing), ..Default::default() };
        let mut text = report.to_kv_text();
        text.push_str(&format!(
            "keyframes = {}\npoints = {}\nbackend_mid = {}\nbackend_end = {}\n",
            self.keyframes.len(),
            self.pointcloud.len(),
            self.backend_calls.mid,
            self.backend_calls.end
        ));
        std::fs::write(dir.join("report.txt"), text)?;
        std::fs::write(dir.join("report.json"), report.to_json() + "\n")?;
        if let Some(log) = &self.loss_log {
            let text: Vec<String> = log.iter().map(LossReport::to_kv_text).collect();
            std::fs::write(dir.join("losses.txt"), text.join("\n"))?;
        }
        Ok(())
    }
}

pub fn run_sequence(source: &SequenceSource, cfg: &PipelineConfig, model: &SlamFormer) -> Result<RunArtifacts> {
    run_sequence_with(source, cfg, model, &FullAttentionRefiner, &MonotonicClock::new())
}

fn refine_and_share(
    model: &SlamFormer,
    refiner: &dyn Refiner<f32>,
    state: &mut TokenMapState,
    timing: &mut TimingLog,
    clock: &dyn Clock,
) -> Result<()> {
    if let Some(r) = timing.time(clock, Stage::Backend, || refiner.refine(model, state))? {
        share_cache(state, &r)?;
    }
    Ok(())
}

/// Detect, initialise or track each frame; run the backend on the trigger
/// schedule and once more at the end when configured. Outputs are decoded
/// from the final token map.
pub fn run_sequence_with(
    source: &SequenceSource,
    cfg: &PipelineConfig,
    model: &SlamFormer,
    refiner: &dyn Refiner<f32>,
    clock: &dyn Clock,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    source.validate()?;
    ensure!(model.config() == &cfg.model, Config, "model weights do not match the configured model");
    let n = cfg.frontend.max_frames.map_or(source.frames.len(), |m| m.min(source.frames.len()));
    let frames = &source.frames[..n];
    ensure!(frames.len() >= 2, Contract, "need at least 2 frames, got {}", frames.len());

    let start = clock.now();
    let mut timing = TimingLog::default();
    let mut calls = BackendCalls::default();
    let mut state: Option<TokenMapState> = None;
    let mut images = vec![frames[0].clone()];
    let mut since_backend = 0;
    for frame in &frames[1..] {
        let prev = images.last().expect("first frame is a keyframe");
        let decision = timing.time(clock, Stage::KfDetection, || detect_keyframe(model, prev, frame, cfg.frontend.tau))?;
        if !decision.is_keyframe {
            continue;
        }
        match state.as_mut() {
            None => {
                let (s, _) = timing.time(clock, Stage::Frontend, || initialize_map(model, prev, frame))?;
                state = Some(s);
                since_backend = 2;
            }
            Some(s) => {
                timing.time(clock, Stage::Frontend, || track_and_map(model, frame, s))?;
                since_backend += 1;
            }
        }
        images.push(frame.clone());
        if should_trigger(since_backend, &cfg.backend) {
            refine_and_share(model, refiner, state.as_mut().expect("initialised"), &mut timing, clock)?;
            calls.mid += 1;
            since_backend = 0;
        }
    }
    let Some(mut state) = state else {
        return Err(Error::Config(format!(
            "only one keyframe among {} frames; lower tau (currently {})",
            frames.len(),
            cfg.frontend.tau
        )));
    };
    if cfg.backend.run_end {
        refine_and_share(model, refiner, &mut state, &mut timing, clock)?;
        calls.end += 1;
    }

    let tape = Tape::no_grad();
    let predictions = state.map.iter().map(|m| model.predict(&tape, m)).collect::<Result<Vec<_>>>()?;
    let raw: Vec<SE3Pose> = predictions.iter().map(|p| p.pose.to_se3()).collect();
    let anchor = raw[0].inverse();
    let poses: Vec<SE3Pose> = raw.iter().map(|g| anchor.compose(g)).collect();
    let trajectory = images.iter().zip(&poses).map(|(f, &pose)| TimedPose { timestamp: f.timestamp, pose }).collect();
    let pointcloud = fuse_pointcloud(&predictions, &poses, &images, cfg.confidence_threshold)?;
    timing.frames = frames.len();
    timing.wall = clock.now().saturating_sub(start);
    Ok(RunArtifacts {
        trajectory,
        keyframes: state.keyframes.clone(),
        predictions,
        pointcloud,
        timing: timing_summary(&timing),
        timing_log: timing,
        backend_calls: calls,
        loss_log: None,
    })
}
