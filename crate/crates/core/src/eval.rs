//! Measurement suite: ATE RMSE after trajectory alignment, reconstruction
//! accuracy/completeness/chamfer, and per-stage timing.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::geometry::{umeyama, Point3, SE3Pose, Sim3Transform};

/// TUM toolchain association window, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// Points sampled per cloud for reconstruction metrics.
pub const DEFAULT_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: SE3Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    #[default]
    Sim3,
    Se3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEval {
    pub ate_rmse: f64,
    pub alignment: Sim3Transform,
    pub matched_pairs: usize,
}

/// One-to-one timestamp matching: candidate pairs within `window` are taken
/// greedily by increasing time gap. Returned sorted by the first index.
pub fn associate(a: &[f64], b: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mut candidates = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let lo = sorted.partition_point(|&s| s < t - window);
        for (k, &s) in sorted.iter().enumerate().skip(lo) {
            if s > t + window {
                break;
            }
            candidates.push(((s - t).abs(), i, order[k]));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn ate_rmse(pred: &[TimedPose], gt: &[TimedPose], mode: AlignMode) -> Result<TrajectoryEval> {
    ate_rmse_with_window(pred, gt, mode, ASSOCIATION_WINDOW)
}

/// Align predicted camera centres to ground truth and report the RMSE of
/// the translational residuals.
pub fn ate_rmse_with_window(pred: &[TimedPose], gt: &[TimedPose], mode: AlignMode, window: f64) -> Result<TrajectoryEval> {
    let ta: Vec<f64> = pred.iter().map(|p| p.timestamp).collect();
    let tb: Vec<f64> = gt.iter().map(|p| p.timestamp).collect();
    let pairs = associate(&ta, &tb, window);
    ensure!(pairs.len() >= 3, Evaluation, "only {} timestamp-matched pairs, need at least 3", pairs.len());
    let centre = |p: &TimedPose| -> Point3 { p.pose.translation.into() };
    let src: Vec<Point3> = pairs.iter().map(|&(i, _)| centre(&pred[i])).collect();
    let tgt: Vec<Point3> = pairs.iter().map(|&(_, j)| centre(&gt[j])).collect();
    let alignment = umeyama(&src, &tgt, mode == AlignMode::Sim3)?;
    let sq: f64 = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| {
            let a = alignment.apply(s);
            (0..3).map(|k| (a[k] - t[k]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(TrajectoryEval { ate_rmse: (sq / pairs.len() as f64).sqrt(), alignment, matched_pairs: pairs.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconEval {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    pub samples: usize,
}

/// Uniform grid over a point set for exact nearest-neighbour queries.
pub struct NeighborGrid<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> NeighborGrid<'a> {
    pub fn new(points: &'a [Point3]) -> Result<Self> {
        ensure!(!points.is_empty(), Evaluation, "empty point set");
        ensure!(points.iter().flatten().all(|v| v.is_finite()), Evaluation, "non-finite point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let cell = (extent / (points.len() as f64).cbrt()).max(1e-9);
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell) as usize + 1).min(1 << 10));
        let mut grid = Self { points, origin: lo, cell, dims, cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]] };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(p);
            let idx = grid.flat(c);
            grid.cells[idx].push(i as u32);
        }
        Ok(grid)
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        [0, 1, 2].map(|k| (((p[k] - self.origin[k]) / self.cell).floor().max(0.0) as usize).min(self.dims[k] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Distance to the closest point. Cells are scanned in growing Chebyshev
    /// shells; anything outside shell `r` is at least `r · cell` away.
    pub fn nearest(&self, q: &Point3) -> f64 {
        let c = self.cell_of(q);
        let max_r = *self.dims.iter().max().expect("three dims");
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            let lo = c.map(|v| v.saturating_sub(r));
            let hi = [0, 1, 2].map(|k| (c[k] + r).min(self.dims[k] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let shell = [x, y, z].iter().zip(&c).any(|(&a, &b)| a.abs_diff(b) == r);
                        if !shell {
                            continue;
                        }
                        for &i in &self.cells[self.flat([x, y, z])] {
                            let p = &self.points[i as usize];
                            let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
                            best = best.min(d);
                        }
                    }
                }
            }
            if best.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        best.sqrt()
    }
}

fn subsample(points: &[Point3], samples: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    if points.len() <= samples {
        return points.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, points.len(), samples).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

fn mean_nearest(from: &[Point3], to: &[Point3]) -> Result<f64> {
    let grid = NeighborGrid::new(to)?;
    Ok(from.iter().map(|q| grid.nearest(q)).sum::<f64>() / from.len() as f64)
}

/// Accuracy (pred → gt), completeness (gt → pred) and their mean, on seeded
/// fixed-count subsamples of both clouds.
pub fn recon_metrics(pred: &[Point3], gt: &[Point3], samples: usize, seed: u64) -> Result<ReconEval> {
    ensure!(!pred.is_empty() && !gt.is_empty(), Evaluation, "empty point cloud");
    ensure!(samples >= 1, Evaluation, "sample count must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = subsample(pred, samples, &mut rng);
    let g = subsample(gt, samples, &mut rng);
    let accuracy = mean_nearest(&p, &g)?;
    let completeness = mean_nearest(&g, &p)?;
    Ok(ReconEval { accuracy, completeness, chamfer: 0.5 * (accuracy + completeness), samples: p.len().max(g.len()) })
}

/// Monotonic time source; injectable so timing tests are deterministic.
pub trait Clock {
    fn now(&self) -> Duration;
}

pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Replays a fixed list of readings; the last one repeats once exhausted.
pub struct ScriptedClock {
    readings: RefCell<VecDeque<Duration>>,
    last: RefCell<Duration>,
}

impl ScriptedClock {
    pub fn new(readings: impl IntoIterator<Item = Duration>) -> Self {
        Self { readings: RefCell::new(readings.into_iter().collect()), last: RefCell::new(Duration::ZERO) }
    }

    /// A clock that advances by `step` on every reading.
    pub fn ticking(step: Duration, count: usize) -> Self {
        Self::new((0..count as u32).map(|i| step * i))
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> Duration {
        if let Some(t) = self.readings.borrow_mut().pop_front() {
            *self.last.borrow_mut() = t;
        }
        *self.last.borrow()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    KfDetection,
    Frontend,
    Backend,
}

/// Raw per-call durations collected by the pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingLog {
    pub kf_detection: Vec<Duration>,
    pub frontend: Vec<Duration>,
    pub backend: Vec<Duration>,
    pub frames: usize,
    pub wall: Duration,
}

impl TimingLog {
    pub fn record(&mut self, stage: Stage, d: Duration) {
        match stage {
            Stage::KfDetection => self.kf_detection.push(d),
            Stage::Frontend => self.frontend.push(d),
            Stage::Backend => self.backend.push(d),
        }
    }

    /// Time `f` on `clock` and record it under `stage`.
    pub fn time<T>(&mut self, clock: &dyn Clock, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = clock.now();
        let out = f();
        self.record(stage, clock.now().saturating_sub(start));
        out
    }
}

/// Mean time per execution for each stage that ran, and overall FPS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub kf_detection_ms: Option<f64>,
    pub frontend_ms: Option<f64>,
    pub backend_ms: Option<f64>,
    pub frames: usize,
    pub fps: f64,
}

fn mean_ms(samples: &[Duration]) -> Option<f64> {
    (!samples.is_empty()).then(|| samples.iter().map(|d| d.as_secs_f64() * 1e3).sum::<f64>() / samples.len() as f64)
}

pub fn timing_summary(log: &TimingLog) -> TimingReport {
    let wall = log.wall.max(Duration::from_nanos(1)).as_secs_f64();
    TimingReport {
        kf_detection_ms: mean_ms(&log.kf_detection),
        frontend_ms: mean_ms(&log.frontend),
        backend_ms: mean_ms(&log.backend),
        frames: log.frames,
        fps: log.frames as f64 / wall,
    }
}

/// Everything `eval` can report, rendered as `key = value` lines or JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub ate_rmse: Option<f64>,
    pub ate_mode: Option<&'static str>,
    pub matched_pairs: Option<usize>,
    pub alignment_scale: Option<f64>,
    pub recon: Option<ReconEval>,
    pub timing: Option<TimingReport>,
}

impl EvalReport {
    pub fn with_trajectory(mut self, t: &TrajectoryEval, mode: AlignMode) -> Self {
        self.ate_rmse = Some(t.ate_rmse);
        self.ate_mode = Some(match mode {
            AlignMode::Sim3 => "sim3",
            AlignMode::Se3 => "se3",
        });
        self.matched_pairs = Some(t.matched_pairs);
        self.alignment_scale = Some(t.alignment.scale);
        self
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        if let Some(v) = self.ate_rmse {
            kv("ate_rmse", format!("{v:.9}"));
        }
        if let Some(v) = self.ate_mode {
            kv("ate_mode", v.to_string());
        }
        if let Some(v) = self.matched_pairs {
            kv("matched_pairs", v.to_string());
        }
        if let Some(v) = self.alignment_scale {
            kv("alignment_scale", format!("{v:.9}"));
        }
        if let Some(r) = &self.recon {
            kv("accuracy", format!("{:.9}", r.accuracy));
            kv("completeness", format!("{:.9}", r.completeness));
            kv("chamfer", format!("{:.9}", r.chamfer));
            kv("samples", r.samples.to_string());
        }
        if let Some(t) = &self.timing {
            for (k, v) in [("tpe_kf_detection_ms", t.kf_detection_ms), ("tpe_frontend_ms", t.frontend_ms), ("tpe_backend_ms", t.backend_ms)] {
                if let Some(v) = v {
                    kv(k, format!("{v:.3}"));
                }
            }
            kv("frames", t.frames.to_string());
            kv("fps", format!("{:.3}", t.fps));
        }
        s
    }

    /// Pretty JSON with floats rounded to nine decimals, like the text form.
    pub fn to_json(&self) -> String {
        fn round(v: &mut serde_json::Value) {
            match v {
                serde_json::Value::Number(n) if n.is_f64() => {
                    let x = (n.as_f64().expect("f64 number") * 1e9).round() / 1e9;
                    *v = serde_json::json!(x + 0.0);
                }
                serde_json::Value::Object(m) => m.values_mut().for_each(round),
                serde_json::Value::Array(a) => a.iter_mut().for_each(round),
                _ => {}
            }
        }
        let mut v = serde_json::to_value(self).expect("report is plain data");
        round(&mut v);
        serde_json::to_string_pretty(&v).expect("report is plain data")
    }
}

#[cfg(test)]
mod tests;
