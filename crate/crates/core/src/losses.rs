//! Training objective: confidence-weighted depth and pointmap losses with
//! gradient terms, the pairwise camera loss, per-mode and joint totals.

use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};
use crate::geometry::{relative_pose, solve_scale, Point3, SE3Pose};
use crate::model::{FramePrediction, PosePrediction};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Camera-loss weight λ.
    pub lambda: f64,
    /// Mode-3 weight β.
    pub beta: f64,
    /// Confidence regulariser weight α.
    pub alpha: f64,
    /// Huber threshold ε, scene units.
    pub epsilon_huber: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 100.0, beta: 10.0, alpha: 0.2, epsilon_huber: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.epsilon_huber > 0.0, Config, "alpha and epsilon must be positive");
        ensure!(self.lambda >= 0.0 && self.beta >= 0.0, Config, "lambda and beta must be non-negative");
        ensure!(
            [self.lambda, self.beta, self.alpha, self.epsilon_huber].iter().all(|v| v.is_finite()),
            Config,
            "loss weights must be finite"
        );
        Ok(())
    }
}

/// Ground truth for one frame: depth (0 or non-finite = invalid), the
/// camera-local pointmap and the camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub pointmap: Vec<Point3>,
    pub pose: SE3Pose,
}

impl FrameTarget {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, pointmap: Vec<Point3>, pose: SE3Pose) -> Result<Self> {
        let n = height * width;
        ensure!(depth.len() == n && pointmap.len() == n, Dimension, "target maps must have {} pixels", n);
        Ok(Self { height, width, depth, pointmap, pose })
    }

    pub fn is_valid(&self, px: usize) -> bool {
        let d = self.depth[px];
        d > 0.0 && d.is_finite() && self.pointmap[px].iter().all(|v| v.is_finite())
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.depth.len()).map(|p| self.is_valid(p)).collect()
    }
}

/// A loss value on the tape with its per-frame contributions (`None` for
/// frames excluded for lack of valid pixels).
#[derive(Debug, Clone)]
pub struct LossTerm<S: Real> {
    pub total: Tensor<S>,
    pub per_frame: Vec<Option<f64>>,
}

fn check_pairing<S: Real>(preds: &[FramePrediction<S>], targets: &[FrameTarget]) -> Result<(usize, usize)> {
    ensure!(!preds.is_empty(), Contract, "no frames: frame 1 is required");
    ensure!(preds.len() == targets.len(), Dimension, "{} predictions for {} targets", preds.len(), targets.len());
    let (h, w) = (targets[0].height, targets[0].width);
    for (p, t) in preds.iter().zip(targets) {
        ensure!(t.height == h && t.width == w, Dimension, "targets of different sizes");
        ensure!(p.depth.numel() == h * w && p.pointmap.shape() == [h * w, 3], Dimension, "prediction does not match {}x{}", h, w);
    }
    Ok((h, w))
}

fn constant<S: Real>(shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<Tensor<S>> {
    Tensor::new(shape.to_vec(), data.into_iter().map(S::lit).collect())
}

/// Masks for the pixel term and the x / y gradient terms: a difference is
/// used only when both of its pixels are valid.
fn masks(valid: &[bool], h: usize, w: usize) -> [Vec<f64>; 3] {
    let px = valid.iter().map(|&v| v as u8 as f64).collect();
    let gx = (0..h * w).map(|p| (p % w + 1 < w && valid[p] && valid[p + 1]) as u8 as f64).collect();
    let gy = (0..h * w).map(|p| (p / w + 1 < h && valid[p] && valid[p + w]) as u8 as f64).collect();
    [px, gx, gy]
}

/// `Σ_px Σ*·m·cost` for one frame, with `cost` a `[n]` tensor.
fn weighted<S: Real>(tape: &Tape<S>, conf: &Tensor<S>, mask: &[f64], cost: &Tensor<S>) -> Result<Tensor<S>> {
    let m = constant(&[mask.len()], mask.iter().copied())?;
    tape.sum(&tape.mul(&tape.mul(conf, &m)?, cost)?)
}

/// Shared structure of the depth and pointmap losses. `residual(t)` returns
/// `[n × c]` residuals for frame `t`; `norm` turns `[n × c]` into the
/// per-pixel cost `[n]`.
fn confidence_weighted_loss<S: Real>(
    tape: &Tape<S>,
    preds: &[FramePrediction<S>],
    targets: &[FrameTarget],
    alpha: f64,
    residual: impl Fn(usize) -> Result<Tensor<S>>,
    norm: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    name: &str,
) -> Result<LossTerm<S>> {
    ensure!(alpha > 0.0, Config, "alpha must be positive");
    let (h, w) = check_pairing(preds, targets)?;
    let mut frame_losses = Vec::new();
    let mut per_frame = Vec::with_capacity(preds.len());
    for (t, (pred, target)) in preds.iter().zip(targets).enumerate() {
        let valid = target.valid_mask();
        if !valid.iter().any(|&v| v) {
            log::warn!("{name} loss: frame {t} has no valid pixels, excluded");
            per_frame.push(None);
            continue;
        }
        let [m_px, m_x, m_y] = masks(&valid, h, w);
        let r = residual(t)?;
        let pixel = weighted(tape, &pred.confidence, &m_px, &norm(&r)?)?;
        let gx = weighted(tape, &pred.confidence, &m_x, &norm(&tape.spatial_diff(&r, h, w, 0)?)?)?;
        let gy = weighted(tape, &pred.confidence, &m_y, &norm(&tape.spatial_diff(&r, h, w, 1)?)?)?;
        let reg = weighted(tape, &tape.log(&pred.confidence)?, &m_px, &Tensor::ones(&[h * w]))?;
        let loss = tape.add(&tape.add(&pixel, &gx)?, &gy)?;
        let loss = tape.sub(&loss, &tape.scale(&reg, S::lit(alpha))?)?;
        per_frame.push(Some(loss.item()?.as_f64()));
        frame_losses.push(loss);
    }
    if frame_losses.is_empty() {
        return Err(Error::Estimation(format!("{name} loss: every frame lacks valid pixels")));
    }
    let count = frame_losses.len();
    let total = sum_all(tape, frame_losses)?;
    Ok(LossTerm { total: tape.scale(&total, S::lit(1.0 / count as f64))?, per_frame })
}

/// `Σ_t [Σ Σ*|s D* − D| + Σ Σ*|∇(s D*) − ∇D| − α Σ log Σ*]`, mean over frames.
/// The gradient term is the L1 norm of the (x, y) difference pair.
pub fn depth_loss<S: Real>(
    tape: &Tape<S>,
    preds: &[FramePrediction<S>],
    targets: &[FrameTarget],
    scale: f64,
    alpha: f64,
) -> Result<LossTerm<S>> {
    let residual = |t: usize| -> Result<Tensor<S>> {
        let n = targets[t].depth.len();
        let gt = constant(&[n], targets[t].depth.iter().map(|&d| if d.is_finite() { d } else { 0.0 }))?;
        let r = tape.sub(&tape.scale(&preds[t].depth, S::lit(scale))?, &gt)?;
        tape.reshape(&r, &[n, 1])
    };
    let norm = |r: &Tensor<S>| -> Result<Tensor<S>> { tape.reshape(&tape.abs(r)?, &[r.numel()]) };
    confidence_weighted_loss(tape, preds, targets, alpha, residual, norm, "depth")
}

/// `g_a⁻¹ g_b` of predicted poses on the tape: `(quat [4], trans [1×3])`.
pub fn relative_pose_tensors<S: Real>(
    tape: &Tape<S>,
    a: &PosePrediction<S>,
    b: &PosePrediction<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let q = tape.quat_mul(&tape.quat_conj(&a.quat)?, &b.quat)?;
    let ra = tape.quat_to_rotmat(&a.quat)?;
    let dt = tape.reshape(&tape.sub(&b.trans, &a.trans)?, &[1, 3])?;
    Ok((q, tape.matmul(&dt, &ra)?))
}

/// Predicted pointmap of frame `t` expressed in frame 0's camera.
fn aligned_prediction<S: Real>(tape: &Tape<S>, preds: &[FramePrediction<S>], t: usize) -> Result<Tensor<S>> {
    let (q, trans) = relative_pose_tensors(tape, &preds[0].pose, &preds[t].pose)?;
    let r = tape.quat_to_rotmat(&q)?;
    let rotated = tape.matmul(&preds[t].pointmap, &tape.transpose(&r)?)?;
    tape.add_row(&rotated, &tape.reshape(&trans, &[3])?)
}

fn aligned_target(targets: &[FrameTarget], t: usize) -> Vec<Point3> {
    let rel = relative_pose(&targets[0].pose, &targets[t].pose);
    targets[t].pointmap.iter().map(|p| if p.iter().all(|v| v.is_finite()) { rel.transform_point(p) } else { [0.0; 3] }).collect()
}

/// Same structure as [`depth_loss`] on frame-0-aligned 3-D points with a
/// per-pixel Euclidean residual.
pub fn pointmap_loss<S: Real>(
    tape: &Tape<S>,
    preds: &[FramePrediction<S>],
    targets: &[FrameTarget],
    scale: f64,
    alpha: f64,
) -> Result<LossTerm<S>> {
    check_pairing(preds, targets)?;
    let residual = |t: usize| -> Result<Tensor<S>> {
        let pred = aligned_prediction(tape, preds, t)?;
        let gt = aligned_target(targets, t);
        let gt = constant(&[gt.len(), 3], gt.iter().flatten().copied())?;
        tape.sub(&tape.scale(&pred, S::lit(scale))?, &gt)
    };
    let norm = |r: &Tensor<S>| tape.row_norm(r);
    confidence_weighted_loss(tape, preds, targets, alpha, residual, norm, "pointmap")
}

/// Σ over pairs `i < j` of Huber(`[log(q_gt_rel⁻¹ q_pred_rel); s·t_pred_rel − t_gt_rel]`).
pub fn camera_loss<S: Real>(
    tape: &Tape<S>,
    poses: &[PosePrediction<S>],
    gt: &[SE3Pose],
    scale: f64,
    epsilon: f64,
) -> Result<Tensor<S>> {
    ensure!(poses.len() >= 2, Contract, "camera loss needs at least 2 frames, got {}", poses.len());
    ensure!(poses.len() == gt.len(), Dimension, "{} predicted poses for {} ground-truth poses", poses.len(), gt.len());
    ensure!(epsilon > 0.0, Config, "huber epsilon must be positive");
    let mut terms = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let (q, t) = relative_pose_tensors(tape, &poses[i], &poses[j])?;
            let rel = relative_pose(&gt[i], &gt[j]);
            let q_gt_inv = constant(&[4], rel.inverse().wxyz())?;
            let rot = tape.quat_log(&tape.quat_mul(&q_gt_inv, &q)?)?;
            let t_gt = constant(&[3], rel.translation.iter().copied())?;
            let trans = tape.sub(&tape.scale(&tape.reshape(&t, &[3])?, S::lit(scale))?, &t_gt)?;
            let r = tape.concat_rows(&[&tape.reshape(&rot, &[1, 3])?, &tape.reshape(&trans, &[1, 3])?])?;
            terms.push(tape.sum(&tape.huber(&r, S::lit(epsilon))?)?);
        }
    }
    sum_all(tape, terms)
}

fn sum_all<S: Real>(tape: &Tape<S>, terms: Vec<Tensor<S>>) -> Result<Tensor<S>> {
    let mut iter = terms.into_iter();
    let first = iter.next().ok_or_else(|| Error::Contract("empty sum".into()))?;
    iter.try_fold(first, |acc, t| tape.add(&acc, &t))
}

/// `s*` for one mode window: frame-0-aligned predicted points against the
/// aligned ground truth, weighted by ground-truth depth. Detached.
pub fn estimate_scale<S: Real>(preds: &[FramePrediction<S>], targets: &[FrameTarget]) -> Result<f64> {
    check_pairing(preds, targets)?;
    let tape = Tape::<S>::no_grad();
    let (mut p, mut g, mut d) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..preds.len() {
        let pred = aligned_prediction(&tape, preds, t)?;
        let gt = aligned_target(targets, t);
        for (px, gpt) in gt.iter().enumerate() {
            if targets[t].is_valid(px) {
                let row = pred.row(px);
                p.push([row[0].as_f64(), row[1].as_f64(), row[2].as_f64()]);
                g.push(*gpt);
                d.push(targets[t].depth[px]);
            }
        }
    }
    Ok(solve_scale(&p, &g, &d)?.scale)
}

/// One mode's loss with its components kept for reporting.
#[derive(Debug, Clone)]
pub struct ModeLoss<S: Real> {
    pub depth: LossTerm<S>,
    pub pointmap: LossTerm<S>,
    pub camera: Tensor<S>,
    pub total: Tensor<S>,
    pub scale: f64,
}

/// `L_depth + L_pmap + λ L_cam` with one detached `s*` for the window.
pub fn mode_loss<S: Real>(
    tape: &Tape<S>,
    preds: &[FramePrediction<S>],
    targets: &[FrameTarget],
    cfg: &LossConfig,
) -> Result<ModeLoss<S>> {
    let scale = estimate_scale(preds, targets)?;
    mode_loss_at_scale(tape, preds, targets, cfg, scale)
}

/// [`mode_loss`] with `s*` supplied by the caller.
pub fn mode_loss_at_scale<S: Real>(
    tape: &Tape<S>,
    preds: &[FramePrediction<S>],
    targets: &[FrameTarget],
    cfg: &LossConfig,
    scale: f64,
) -> Result<ModeLoss<S>> {
    cfg.validate()?;
    let depth = depth_loss(tape, preds, targets, scale, cfg.alpha)?;
    let pointmap = pointmap_loss(tape, preds, targets, scale, cfg.alpha)?;
    let poses: Vec<PosePrediction<S>> = preds.iter().map(|p| p.pose.clone()).collect();
    let gt: Vec<SE3Pose> = targets.iter().map(|t| t.pose).collect();
    let camera = camera_loss(tape, &poses, &gt, scale, cfg.epsilon_huber)?;
    let total = combine_mode(tape, &depth.total, &pointmap.total, &camera, cfg.lambda)?;
    Ok(ModeLoss { depth, pointmap, camera, total, scale })
}

pub fn combine_mode<S: Real>(
    tape: &Tape<S>,
    depth: &Tensor<S>,
    pointmap: &Tensor<S>,
    camera: &Tensor<S>,
    lambda: f64,
) -> Result<Tensor<S>> {
    tape.add(&tape.add(depth, pointmap)?, &tape.scale(camera, S::lit(lambda))?)
}

/// `L1 + L2 + β L3`.
pub fn joint_objective<S: Real>(
    tape: &Tape<S>,
    l1: &Tensor<S>,
    l2: &Tensor<S>,
    l3: &Tensor<S>,
    beta: f64,
) -> Result<Tensor<S>> {
    tape.add(&tape.add(l1, l2)?, &tape.scale(l3, S::lit(beta))?)
}

/// Scalar summary of one training iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub l_depth: f64,
    pub l_pmap: f64,
    pub l_cam: f64,
    pub l_mode1: f64,
    pub l_mode2: f64,
    pub l_mode3: f64,
    pub l_all: f64,
    /// `(mode, frame, depth term, pointmap term)`.
    pub per_frame: Vec<(u8, usize, Option<f64>, Option<f64>)>,
}

impl LossReport {
    pub fn from_modes<S: Real>(modes: [&ModeLoss<S>; 3], l_all: &Tensor<S>) -> Result<Self> {
        let v = |t: &Tensor<S>| t.item().map(|x| x.as_f64());
        let mut report = LossReport {
            l_mode1: v(&modes[0].total)?,
            l_mode2: v(&modes[1].total)?,
            l_mode3: v(&modes[2].total)?,
            l_all: v(l_all)?,
            ..Default::default()
        };
        for (k, m) in modes.iter().enumerate() {
            report.l_depth += v(&m.depth.total)?;
            report.l_pmap += v(&m.pointmap.total)?;
            report.l_cam += v(&m.camera)?;
            for (f, (d, p)) in m.depth.per_frame.iter().zip(&m.pointmap.per_frame).enumerate() {
                report.per_frame.push((k as u8 + 1, f, *d, *p));
            }
        }
        Ok(report)
    }

    /// Flat `key = value` block, one entry per line.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("l_depth", self.l_depth),
            ("l_pmap", self.l_pmap),
            ("l_cam", self.l_cam),
            ("l_mode1", self.l_mode1),
            ("l_mode2", self.l_mode2),
            ("l_mode3", self.l_mode3),
            ("l_all", self.l_all),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (mode, frame, d, p) in &self.per_frame {
            let fmt = |x: &Option<f64>| x.map_or("excluded".to_string(), |v| v.to_string());
            let _ = writeln!(s, "mode{mode}.frame{frame}.depth = {}", fmt(d));
            let _ = writeln!(s, "mode{mode}.frame{frame}.pmap = {}", fmt(p));
        }
        s
    }
}
