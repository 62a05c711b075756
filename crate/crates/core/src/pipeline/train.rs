//! One training iteration runs all three attention modes with shared
//! weights, takes one backward pass on the joint objective and one
//! momentum-SGD step.

use super::SequenceSource;
use crate::attention::{AttentionMask, FrameLayout};
use crate::error::{ensure, Result};
use crate::losses::{joint_objective, mode_loss, FrameTarget, LossConfig, LossReport, ModeLoss};
use crate::model::{FrameTokens, ImageFrame, MapTokens, SlamFormer, TokenOrigin};
use crate::nn::Params;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub freeze_pose_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, momentum: 0.9, grad_clip: 10.0, freeze_pose_head: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), Config, "learning rate must be finite and >= 0");
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum must lie in [0, 1)");
        ensure!(self.grad_clip >= 0.0 && self.grad_clip.is_finite(), Config, "grad_clip must be finite and >= 0");
        Ok(())
    }
}

/// A short clip with full ground truth.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub frames: Vec<ImageFrame>,
    pub targets: Vec<FrameTarget>,
}

impl TrainingClip {
    pub fn new(frames: Vec<ImageFrame>, targets: Vec<FrameTarget>) -> Result<Self> {
        ensure!(frames.len() >= 3, Contract, "training clips need at least 3 frames, got {}", frames.len());
        ensure!(frames.len() == targets.len(), Dimension, "{} frames for {} targets", frames.len(), targets.len());
        Ok(Self { frames, targets })
    }

    /// Frames `range` of a source with ground truth.
    pub fn from_source(src: &SequenceSource, range: std::ops::Range<usize>) -> Result<Self> {
        let targets = src.targets(range.clone())?;
        Self::new(src.frames[range].to_vec(), targets)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames kept as backend map tokens in the Mode-2 pass.
    pub fn mode2_prefix(&self) -> usize {
        (self.len() / 2).max(2)
    }
}

/// Per-parameter gradients in the model's visit order; parameters the loss
/// did not reach get zeros.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub names: Vec<String>,
    pub grads: Vec<Vec<f32>>,
}

impl ParamGradients {
    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt()
    }
}

fn map_tokens(tokens: &[FrameTokens<f32>], origin: TokenOrigin) -> Vec<MapTokens> {
    tokens.iter().enumerate().map(|(i, t)| MapTokens { tokens: t.clone(), frame_index: i, origin }).collect()
}

fn mode_pass(
    tape: &Tape<f32>,
    model: &SlamFormer,
    inputs: &[FrameTokens<f32>],
    mask: &AttentionMask,
    clip: &TrainingClip,
    cfg: &LossConfig,
) -> Result<(ModeLoss<f32>, Vec<FrameTokens<f32>>)> {
    let out = model.backbone_forward(tape, inputs, mask, None)?;
    let preds = map_tokens(&out.tokens, TokenOrigin::Frontend)
        .iter()
        .map(|m| model.predict(tape, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((mode_loss(tape, &preds, &clip.targets, cfg)?, out.tokens))
}

/// Forward all three modes and backpropagate `L_all`:
/// Mode 1 is the causal frontend pass; Mode 2 re-enters the (detached)
/// Mode-1 tokens of a prefix and processes the remaining images in one
/// mixed-attention pass; Mode 3 runs full attention over all detached
/// Mode-1 tokens.
pub fn compute_gradients(clip: &TrainingClip, model: &SlamFormer, cfg: &LossConfig) -> Result<(LossReport, ParamGradients)> {
    ensure!(clip.len() >= 3, Contract, "training clips need at least 3 frames");
    let n = clip.len();
    let layout = FrameLayout::new(model.config().tokens_per_frame(), n);
    let tape = Tape::new();
    let tm = model.tracked(&tape);
    let images = clip.frames.iter().map(|f| tm.encode_image(&tape, f)).collect::<Result<Vec<_>>>()?;

    let (m1, tokens1) = mode_pass(&tape, &tm, &images, &AttentionMask::causal_full2(layout), clip, cfg)?;
    let memory = map_tokens(&tokens1.iter().map(Tensor::detached).collect::<Vec<_>>(), TokenOrigin::Backend);

    let p = clip.mode2_prefix();
    let mut inputs2 = memory[..p].iter().map(|m| tm.reenter_map_tokens(&tape, m)).collect::<Result<Vec<_>>>()?;
    inputs2.extend_from_slice(&images[p..]);
    let (m2, _) = mode_pass(&tape, &tm, &inputs2, &AttentionMask::mixed(layout, p)?, clip, cfg)?;

    let inputs3 = memory.iter().map(|m| tm.reenter_map_tokens(&tape, m)).collect::<Result<Vec<_>>>()?;
    let (m3, _) = mode_pass(&tape, &tm, &inputs3, &AttentionMask::full(layout), clip, cfg)?;

    let l_all = joint_objective(&tape, &m1.total, &m2.total, &m3.total, cfg.beta)?;
    let report = LossReport::from_modes([&m1, &m2, &m3], &l_all)?;
    let grads = tape.backward(&l_all)?;
    let mut out = ParamGradients { names: Vec::new(), grads: Vec::new() };
    tm.visit("", &mut |name, t| {
        out.grads.push(grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec));
        out.names.push(name);
    });
    Ok((report, out))
}

/// Momentum SGD: `v ← μ v + g`, `w ← w − η v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    pub steps: usize,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, model: &mut SlamFormer, grads: &ParamGradients, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if self.velocity.is_empty() {
            self.velocity = grads.grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let mut count = 0;
        model.visit("", &mut |_, _| count += 1);
        ensure!(
            self.velocity.len() == grads.grads.len() && count == grads.grads.len(),
            Contract,
            "optimizer state or gradients belong to another model"
        );
        let norm = grads.norm();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let (lr, mu, clip) = (cfg.learning_rate as f32, cfg.momentum as f32, clip as f32);
        let mut i = 0;
        let mut result = Ok(());
        model.visit_mut("", &mut |name, t| {
            let (v, g) = (&mut self.velocity[i], &grads.grads[i]);
            i += 1;
            if result.is_err() || (cfg.freeze_pose_head && name.starts_with("pose_head")) {
                return;
            }
            if v.len() != t.numel() || name != grads.names[i - 1] {
                result = Err(crate::error::Error::Contract(format!("gradient layout mismatch at {name}")));
                return;
            }
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = mu * *vk + clip * gk;
            }
            if lr == 0.0 {
                return;
            }
            let data: Vec<f32> = t.data().iter().zip(v.iter()).map(|(w, vk)| w - lr * vk).collect();
            *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        });
        result?;
        self.steps += 1;
        Ok(())
    }
}

pub fn training_iteration(
    clip: &TrainingClip,
    model: &mut SlamFormer,
    optimizer: &mut Sgd,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<LossReport> {
    let (report, grads) = compute_gradients(clip, model, loss)?;
    optimizer.step(model, &grads, train)?;
    Ok(report)
}
