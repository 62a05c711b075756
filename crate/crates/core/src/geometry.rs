//! Pose algebra, pointmap transforms, robust norms, scale solving and
//! trajectory alignment. Everything here is plain `f64`; the differentiable
//! counterparts used by the losses live on the tape.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{ensure, Error, Result};

pub type Point3 = [f64; 3];

/// Rigid camera pose (camera-to-world), stored as a unit quaternion and a
/// translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// From a `(w, x, y, z)` quaternion, normalised on the way in.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation, translation: Vector3::from(t) }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::from(t) }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.quaternion().norm()
    }
}

/// `x ↦ s R x + t` with `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let v = self.scale * (self.rotation * Vector3::from(*p)) + self.translation;
        [v.x, v.y, v.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEstimate {
    pub scale: f64,
    /// Objective value at `scale`.
    pub residual: f64,
}

/// `g_a⁻¹ ∘ g_b`.
pub fn relative_pose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    a.inverse().compose(b)
}

pub fn apply_to_pointmap(g: &SE3Pose, points: &[Point3]) -> Vec<Point3> {
    points.iter().map(|p| g.transform_point(p)).collect()
}

/// Forward differences of an `h × w × c` row-major map along x and y. The
/// last column (for x) and last row (for y) are 0.
pub fn spatial_gradient(map: &[f64], h: usize, w: usize, c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(h >= 2 && w >= 2, Dimension, "spatial gradient needs h, w >= 2, got {}x{}", h, w);
    ensure!(map.len() == h * w * c, Dimension, "map of {} values for {}x{}x{}", map.len(), h, w, c);
    let mut dx = vec![0.0; map.len()];
    let mut dy = vec![0.0; map.len()];
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * c;
            for ch in 0..c {
                if x + 1 < w {
                    dx[p + ch] = map[p + c + ch] - map[p + ch];
                }
                if y + 1 < h {
                    dy[p + ch] = map[p + w * c + ch] - map[p + ch];
                }
            }
        }
    }
    Ok((dx, dy))
}

/// Sum of per-component Huber penalties.
pub fn huber_norm(r: &[f64], epsilon: f64) -> Result<f64> {
    ensure!(epsilon > 0.0, Config, "huber epsilon must be positive, got {}", epsilon);
    Ok(r.iter()
        .map(|&x| if x.abs() <= epsilon { 0.5 * x * x } else { epsilon * (x.abs() - 0.5 * epsilon) })
        .sum())
}

const MIN_SCALE: f64 = 1e-8;

/// Objective minimised by [`solve_scale`]: `Σ_i Σ_c |s·P*_ic − P_ic| / D_i`
/// over pixels with a positive, finite depth.
pub fn scale_objective(s: f64, pred: &[Point3], gt: &[Point3], depth: &[f64]) -> f64 {
    pred.iter()
        .zip(gt)
        .zip(depth)
        .filter(|(_, &d)| d > 0.0 && d.is_finite())
        .map(|((p, g), &d)| (0..3).map(|c| (s * p[c] - g[c]).abs()).sum::<f64>() / d)
        .sum()
}

/// Closed-form minimiser of [`scale_objective`]: the weighted median of the
/// per-coordinate ratios `P/P*` with weights `|P*|/D`, constrained to
/// positive scales.
pub fn solve_scale(pred: &[Point3], gt: &[Point3], depth: &[f64]) -> Result<ScaleEstimate> {
    ensure!(
        pred.len() == gt.len() && gt.len() == depth.len(),
        Dimension,
        "solve_scale lengths {} / {} / {}",
        pred.len(),
        gt.len(),
        depth.len()
    );
    let mut terms: Vec<(f64, f64)> = Vec::new();
    for ((p, g), &d) in pred.iter().zip(gt).zip(depth) {
        if !(d > 0.0 && d.is_finite()) {
            continue;
        }
        for c in 0..3 {
            if p[c] != 0.0 {
                terms.push((g[c] / p[c], p[c].abs() / d));
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Estimation("no valid elements to estimate scale from".into()));
    }
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = terms.iter().map(|t| t.1).sum();
    let mut acc = 0.0;
    let mut median = terms[terms.len() - 1].0;
    for &(ratio, weight) in &terms {
        acc += weight;
        if acc >= 0.5 * total {
            median = ratio;
            break;
        }
    }
    // The objective is convex, so the constrained minimiser is the clamp.
    let scale = median.max(MIN_SCALE);
    Ok(ScaleEstimate { scale, residual: scale_objective(scale, pred, gt, depth) })
}

/// Least-squares similarity `y ≈ s R x + t` (Umeyama). With
/// `with_scale = false` the scale is pinned to 1 (rigid alignment).
pub fn umeyama(source: &[Point3], target: &[Point3], with_scale: bool) -> Result<Sim3Transform> {
    ensure!(source.len() == target.len(), Dimension, "{} source vs {} target points", source.len(), target.len());
    let n = source.len();
    ensure!(n >= 3, Rank, "alignment needs at least 3 correspondences, got {}", n);
    let inv_n = 1.0 / n as f64;
    let mean = |pts: &[Point3]| pts.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) * inv_n;
    let (mu_x, mu_y) = (mean(source), mean(target));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = Vector3::from(*x) - mu_x;
        let dy = Vector3::from(*y) - mu_y;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv_n;
    var_x *= inv_n;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Rank("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    ensure!(
        sv[order[0]] > 0.0 && sv[order[1]] > 1e-12 * sv[order[0]],
        Rank,
        "degenerate (collinear or coincident) correspondences"
    );
    let mut s_diag = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        s_diag[(order[2], order[2])] = -1.0;
    }
    let r = u * s_diag * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| sv[i] * s_diag[(i, i)]).sum();
        trace / var_x
    } else {
        1.0
    };
    ensure!(scale > 0.0 && scale.is_finite(), Rank, "non-positive alignment scale {}", scale);
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = mu_y - scale * (rotation * mu_x);
    Ok(Sim3Transform { scale, rotation, translation })
}

/// Similarity alignment of a predicted trajectory onto ground truth.
pub fn umeyama_sim3(pred: &[Point3], gt: &[Point3]) -> Result<Sim3Transform> {
    umeyama(pred, gt, true)
}
