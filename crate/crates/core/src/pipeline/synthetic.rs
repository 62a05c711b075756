//! Seeded toy scenes with exact ground truth: a textured plane or a
//! coloured point grid seen from a parametric camera path.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Intrinsics, SequenceSource, SourceKind};
use crate::error::{ensure, Result};
use crate::geometry::SE3Pose;
use crate::model::ImageFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Static,
    /// Constant per-frame step in world coordinates.
    Translate { step: [f64; 3] },
    /// Circle of `radius` in the x-y plane, `step` radians per frame, with a
    /// slow yaw.
    Arc { radius: f64, step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scene {
    /// Plane `z = distance`, square of half-width `half_extent`, textured
    /// with `cells` random colour cells per unit length.
    TexturedPlane { distance: f64, half_extent: f64, cells: f64 },
    /// Lattice over `[-half_extent, half_extent]² × [distance, distance +
    /// (layers-1)·spacing]`, each point a small coloured square.
    PointGrid { distance: f64, half_extent: f64, spacing: f64, layers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_frames: usize,
    pub motion: Motion,
    pub scene: Scene,
    pub height: usize,
    pub width: usize,
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub frame_interval: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_frames: 8,
            motion: Motion::Arc { radius: 0.3, step: 0.15 },
            scene: Scene::TexturedPlane { distance: 2.0, half_extent: 4.0, cells: 4.0 },
            height: 32,
            width: 32,
            fov: 1.0,
            frame_interval: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_frames >= 1, Config, "synthetic sequence needs at least one frame");
        ensure!(self.height >= 2 && self.width >= 2, Config, "image must be at least 2x2");
        ensure!(self.fov > 0.0 && self.fov < 3.0, Config, "field of view must lie in (0, 3) rad");
        ensure!(self.frame_interval > 0.0, Config, "frame interval must be positive");
        match self.scene {
            Scene::TexturedPlane { distance, half_extent, cells } => {
                ensure!(distance.is_finite() && half_extent > 0.0 && cells > 0.0, Config, "bad plane parameters");
            }
            Scene::PointGrid { distance, half_extent, spacing, layers } => {
                ensure!(distance.is_finite() && half_extent > 0.0 && spacing > 0.0 && layers >= 1, Config, "bad grid parameters");
                ensure!(half_extent / spacing <= 200.0, Config, "grid too dense");
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.width as f64 / 2.0 / (self.fov / 2.0).tan();
        Intrinsics { fx: f, fy: f, cx: self.width as f64 / 2.0, cy: self.height as f64 / 2.0 }
    }

    /// Camera-to-world pose of frame `i`.
    pub fn pose(&self, i: usize) -> SE3Pose {
        let i = i as f64;
        match self.motion {
            Motion::Static => SE3Pose::identity(),
            Motion::Translate { step } => SE3Pose::from_translation(step.map(|s| s * i)),
            Motion::Arc { radius, step } => {
                let a = step * i;
                let t = Vector3::new(radius * (1.0 - a.cos()), radius * a.sin(), 0.0);
                SE3Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.2 * a, 0.0), t)
            }
        }
    }
}

const TEXTURE: usize = 64;

struct Renderer {
    spec: SyntheticSpec,
    k: Intrinsics,
    palette: Vec<[f32; 3]>,
}

impl Renderer {
    fn colour(&self, i: i64, j: i64) -> [f32; 3] {
        let w = TEXTURE as i64;
        self.palette[(i.rem_euclid(w) * w + j.rem_euclid(w)) as usize]
    }

    /// Image and depth (0 = nothing hit) for camera pose `g`.
    fn render(&self, g: &SE3Pose) -> (Vec<f32>, Vec<f64>) {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut rgb = vec![0.0f32; h * w * 3];
        let mut depth = vec![0.0f64; h * w];
        match self.spec.scene {
            Scene::TexturedPlane { distance, half_extent, cells } => {
                let r = g.rotation_matrix();
                for v in 0..h {
                    for u in 0..w {
                        let ray = Vector3::from(self.k.unproject(u, v, 1.0));
                        let d = r * ray;
                        if d.z <= 1e-12 {
                            continue;
                        }
                        let lambda = (distance - g.translation.z) / d.z;
                        let hit = g.translation + d * lambda;
                        if lambda <= 0.0 || hit.x.abs() > half_extent || hit.y.abs() > half_extent {
                            continue;
                        }
                        let c = self.colour((hit.x * cells).floor() as i64, (hit.y * cells).floor() as i64);
                        let shade = 0.8 + 0.2 * ((hit.x * 9.0).sin() * (hit.y * 7.0).cos()) as f32;
                        let px = v * w + u;
                        depth[px] = lambda;
                        for k in 0..3 {
                            rgb[px * 3 + k] = (c[k] * shade).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            Scene::PointGrid { distance, half_extent, spacing, layers } => {
                let n = (half_extent / spacing).floor() as i64;
                let inv = g.inverse();
                for layer in 0..layers as i64 {
                    for i in -n..=n {
                        for j in -n..=n {
                            let p = [i as f64 * spacing, j as f64 * spacing, distance + layer as f64 * spacing];
                            let c = inv.transform_point(&p);
                            if c[2] <= 1e-6 {
                                continue;
                            }
                            let cu = self.k.fx * c[0] / c[2] + self.k.cx;
                            let cv = self.k.fy * c[1] / c[2] + self.k.cy;
                            let half = (self.k.fx * spacing / c[2] * 0.35).max(0.5);
                            let colour = self.colour(i + 7 * layer, j);
                            let (u0, u1) = ((cu - half).floor().max(0.0), (cu + half).ceil().min(w as f64));
                            let (v0, v1) = ((cv - half).floor().max(0.0), (cv + half).ceil().min(h as f64));
                            for v in v0 as usize..v1.max(v0) as usize {
                                for u in u0 as usize..u1.max(u0) as usize {
                                    let px = v * w + u;
                                    if depth[px] == 0.0 || c[2] < depth[px] {
                                        depth[px] = c[2];
                                        rgb[px * 3..px * 3 + 3].copy_from_slice(&colour);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (rgb, depth)
    }

    fn inside_geometry(&self, g: &SE3Pose) -> bool {
        let c = g.translation;
        match self.spec.scene {
            Scene::TexturedPlane { distance, .. } => c.z >= distance - 1e-3,
            Scene::PointGrid { distance, half_extent, spacing, layers } => {
                let margin = spacing / 2.0;
                let far = distance + (layers - 1) as f64 * spacing;
                c.x.abs() <= half_extent + margin
                    && c.y.abs() <= half_extent + margin
                    && c.z >= distance - margin
                    && c.z <= far + margin
            }
        }
    }
}

/// Render every frame of `spec`; colours come from `seed`. Depth is exact
/// for the plane and per-splat for the grid.
pub fn generate_synthetic_sequence(spec: &SyntheticSpec, seed: u64) -> Result<SequenceSource> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = (0..TEXTURE * TEXTURE).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let renderer = Renderer { spec: *spec, k: spec.intrinsics(), palette };
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut poses = Vec::with_capacity(spec.num_frames);
    let mut depths = Vec::with_capacity(spec.num_frames);
    for i in 0..spec.num_frames {
        let g = spec.pose(i);
        ensure!(!renderer.inside_geometry(&g), Estimation, "camera {} at {:?} is inside the scene geometry", i, g.translation.as_slice());
        let (rgb, depth) = renderer.render(&g);
        frames.push(ImageFrame::new(spec.height, spec.width, rgb, i as f64 * spec.frame_interval, i)?);
        poses.push(g);
        depths.push(depth);
    }
    Ok(SequenceSource {
        kind: SourceKind::Synthetic,
        frames,
        gt_poses: Some(poses),
        gt_depth: Some(depths),
        intrinsics: Some(renderer.k),
        dropped_frames: 0,
    })
}

/// `frames=20,motion=arc,step=0.15,radius=0.3,scene=plane,distance=2,seed=1`
/// style description used on the command line. Returns the spec and seed.
pub fn parse_synthetic_spec(text: &str, height: usize, width: usize) -> Result<(SyntheticSpec, u64)> {
    let mut spec = SyntheticSpec { height, width, ..Default::default() };
    let mut seed = 0;
    let mut motion = "arc".to_string();
    let mut scene = "plane".to_string();
    let (mut step, mut radius, mut dx, mut dy, mut dz) = (None, 0.3, None, 0.0, 0.0);
    let (mut distance, mut extent, mut spacing, mut layers, mut cells) = (2.0, None, 0.25, 1, 4.0);
    let num = |k: &str, v: &str| -> Result<f64> {
        v.parse::<f64>().map_err(|_| crate::error::Error::Config(format!("synthetic {k}: cannot parse {v:?}")))
    };
    for item in text.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| crate::error::Error::Config(format!("synthetic spec item {item:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "frames" => spec.num_frames = num(k, v)? as usize,
            "seed" => seed = num(k, v)? as u64,
            "motion" => motion = v.to_string(),
            "scene" => scene = v.to_string(),
            "step" => step = Some(num(k, v)?),
            "radius" => radius = num(k, v)?,
            "dx" => dx = Some(num(k, v)?),
            "dy" => dy = num(k, v)?,
            "dz" => dz = num(k, v)?,
            "distance" => distance = num(k, v)?,
            "extent" => extent = Some(num(k, v)?),
            "spacing" => spacing = num(k, v)?,
            "layers" => layers = num(k, v)? as usize,
            "cells" => cells = num(k, v)?,
            "fov" => spec.fov = num(k, v)?,
            _ => return Err(crate::error::Error::Config(format!("unknown synthetic key {k:?}"))),
        }
    }
    spec.motion = match motion.as_str() {
        "static" => Motion::Static,
        "translate" => Motion::Translate { step: [dx.or(step).unwrap_or(0.05), dy, dz] },
        "arc" => Motion::Arc { radius, step: step.unwrap_or(0.15) },
        m => return Err(crate::error::Error::Config(format!("unknown motion {m:?}"))),
    };
    spec.scene = match scene.as_str() {
        "plane" => Scene::TexturedPlane { distance, half_extent: extent.unwrap_or(4.0), cells },
        "grid" => Scene::PointGrid { distance, half_extent: extent.unwrap_or(2.0), spacing, layers },
        s => return Err(crate::error::Error::Config(format!("unknown scene {s:?}"))),
    };
    spec.validate()?;
    Ok((spec, seed))
}
