//! File formats: TUM trajectories, binary PLY point clouds and flat
//! `key = value` text.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::eval::TimedPose;
use crate::geometry::{Point3, SE3Pose};
use crate::model::{FramePrediction, ImageFrame};
use crate::tensor::Real;

/// Default confidence threshold for fused points.
pub const CONFIDENCE_THRESHOLD: f64 = 1.5;

/// Nine fractional digits, trailing zeros dropped, no negative zero.
fn fmt_value(v: f64) -> String {
    let s = format!("{v:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

/// One `timestamp tx ty tz qx qy qz qw` line per pose.
pub fn format_trajectory(traj: &[TimedPose]) -> String {
    let mut out = String::new();
    for p in traj {
        let t = p.pose.translation;
        let [w, x, y, z] = p.pose.wxyz();
        let fields: Vec<String> = [t.x, t.y, t.z, x, y, z, w].iter().map(|&v| fmt_value(v)).collect();
        out.push_str(&format!("{:.9} {}\n", p.timestamp, fields.join(" ")));
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TimedPose>> {
    let mut traj = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("line {}: bad number {f:?}", n + 1))))
            .collect::<Result<_>>()?;
        ensure!(v.len() == 8, Format, "line {}: expected 8 fields, found {}", n + 1, v.len());
        ensure!(v.iter().all(|x| x.is_finite()), Format, "line {}: non-finite value", n + 1);
        let pose = SE3Pose::from_wxyz([v[7], v[4], v[5], v[6]], [v[1], v[2], v[3]]);
        traj.push(TimedPose { timestamp: v[0], pose });
    }
    Ok(traj)
}

/// Nothing is created for an empty trajectory.
pub fn write_trajectory(traj: &[TimedPose], path: &Path) -> Result<()> {
    ensure!(!traj.is_empty(), Contract, "refusing to write an empty trajectory");
    std::fs::write(path, format_trajectory(traj))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

impl ColoredPoint {
    pub fn point(&self) -> Point3 {
        self.position.map(f64::from)
    }
}

/// World-frame points of every frame whose confidence exceeds `threshold`,
/// coloured from the frame's image.
pub fn fuse_pointcloud<S: Real>(
    preds: &[FramePrediction<S>],
    poses: &[SE3Pose],
    images: &[ImageFrame],
    threshold: f64,
) -> Result<Vec<ColoredPoint>> {
    ensure!(!preds.is_empty(), Contract, "no frames to fuse");
    ensure!(preds.len() == poses.len() && preds.len() == images.len(), Dimension, "frame, pose and image counts differ");
    let mut out = Vec::new();
    for ((pred, pose), img) in preds.iter().zip(poses).zip(images) {
        let pts = pred.pointmap.to_f64_vec();
        let conf = pred.confidence.to_f64_vec();
        ensure!(img.pixels().len() == conf.len() * 3, Dimension, "image does not match the pointmap");
        for (px, &c) in conf.iter().enumerate() {
            if c <= threshold {
                continue;
            }
            let w = pose.transform_point(&[pts[px * 3], pts[px * 3 + 1], pts[px * 3 + 2]]);
            let rgb = &img.pixels()[px * 3..px * 3 + 3];
            out.push(ColoredPoint {
                position: w.map(|v| v as f32),
                color: [0, 1, 2].map(|k| (rgb[k] * 255.0).round().clamp(0.0, 255.0) as u8),
            });
        }
    }
    Ok(out)
}

pub fn write_ply<W: Write>(points: &[ColoredPoint], mut w: W) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for p in points {
        for v in p.position {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&p.color)?;
    }
    w.flush()?;
    Ok(())
}

/// Fuse and write in one step; returns the number of points written.
pub fn write_pointcloud<S: Real>(
    preds: &[FramePrediction<S>],
    poses: &[SE3Pose],
    images: &[ImageFrame],
    threshold: f64,
    path: &Path,
) -> Result<usize> {
    let points = fuse_pointcloud(preds, poses, images, threshold)?;
    write_ply(&points, BufWriter::new(File::create(path)?))?;
    Ok(points.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(Error::Format(format!("unknown PLY type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Vertex positions (and colours when present) from an ASCII or binary
/// little-endian PLY. Only a leading `vertex` element with scalar
/// properties is supported.
pub fn read_ply<R: Read>(r: R) -> Result<Vec<ColoredPoint>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        ensure!(r.read_line(&mut line)? > 0, Format, "PLY header ends early");
        Ok(line.trim_end().to_string())
    };
    ensure!(next(&mut r)? == "ply", Format, "missing PLY magic");
    let mut binary = None;
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", f, _] => return Err(Error::Format(format!("unsupported PLY format {f}"))),
            ["element", "vertex", n] => {
                ensure!(count.is_none(), Format, "vertex element must come first");
                count = Some(n.parse::<usize>().map_err(|_| Error::Format(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                ensure!(count.is_some(), Format, "vertex element must come first");
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(Error::Format("list properties on vertices".into())),
            ["property", ty, name] if in_vertex => props.push((name.to_string(), PlyType::parse(ty)?)),
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| Error::Format("PLY format line missing".into()))?;
    let count = count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let xyz = [find("x"), find("y"), find("z")];
    ensure!(xyz.iter().all(Option::is_some), Format, "vertex element lacks x, y or z");
    let rgb = [find("red"), find("green"), find("blue")];
    let mut points = Vec::with_capacity(count);
    let mut values = vec![0.0; props.len()];
    let mut text = String::new();
    if !binary {
        r.read_to_string(&mut text)?;
    }
    let mut words = text.split_whitespace();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut buf = vec![0u8; stride];
    for _ in 0..count {
        if binary {
            r.read_exact(&mut buf).map_err(|_| Error::Format("PLY body ends early".into()))?;
            let mut off = 0;
            for (v, (_, t)) in values.iter_mut().zip(&props) {
                *v = t.decode(&buf[off..]);
                off += t.size();
            }
        } else {
            for v in values.iter_mut() {
                let w = words.next().ok_or_else(|| Error::Format("PLY body ends early".into()))?;
                *v = w.parse().map_err(|_| Error::Format(format!("bad PLY value {w:?}")))?;
            }
        }
        let position = xyz.map(|i| values[i.expect("checked")] as f32);
        let color = rgb.map(|i| i.map_or(0, |i| values[i].clamp(0.0, 255.0) as u8));
        points.push(ColoredPoint { position, color });
    }
    Ok(points)
}

pub fn read_ply_file(path: &Path) -> Result<Vec<ColoredPoint>> {
    read_ply(File::open(path)?)
}

/// Flat `key = value` text: blank lines and `#` comments skipped, duplicate
/// keys rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        ensure!(!k.is_empty(), Config, "line {}: empty key", n + 1);
        ensure!(out.iter().all(|(seen, _)| seen != k), Config, "line {}: duplicate key {k}", n + 1);
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PosePrediction;
    use crate::tensor::Tensor;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_line() {
        let t = [TimedPose { timestamp: 0.0, pose: SE3Pose::identity() }];
        assert_eq!(format_trajectory(&t), "0.000000000 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn trajectory_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj: Vec<TimedPose> = (0..50)
            .map(|i| {
                let q = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random::<f64>() * 6.0);
                let t = [rng.random_range(-30.0..30.0), rng.random_range(-1.0..1.0), rng.random::<f64>() * 1e-4];
                TimedPose { timestamp: 1305031102.175304 + i as f64 * 0.033, pose: SE3Pose::new(q, t.into()) }
            })
            .collect();
        let text = format_trajectory(&traj);
        assert!(text.lines().all(|l| !l.ends_with(' ') && l.split(' ').count() == 8));
        let back = parse_trajectory(&text).unwrap();
        for (a, b) in traj.iter().zip(&back) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-9 * a.timestamp.abs().max(1.0));
            assert!((a.pose.translation - b.pose.translation).amax() < 1e-9);
            let (qa, qb) = (a.pose.wxyz(), b.pose.wxyz());
            assert!((0..4).all(|k| (qa[k] - qb[k]).abs() < 1e-9));
        }
    }

    #[test]
    fn empty_trajectory_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        assert!(matches!(write_trajectory(&[], &path), Err(Error::Contract(_))));
        assert!(!path.exists());
    }

    #[test]
    fn trajectory_parser_rejects_garbage() {
        assert!(parse_trajectory("# header\n\n1 0 0 0 0 0 0 1\n").unwrap().len() == 1);
        assert!(matches!(parse_trajectory("1 0 0 0 0 0 1"), Err(Error::Format(_))));
        assert!(matches!(parse_trajectory("1 0 0 x 0 0 0 1"), Err(Error::Format(_))));
    }

    fn prediction(points: Vec<f32>, conf: Vec<f32>) -> FramePrediction<f32> {
        let n = conf.len();
        FramePrediction {
            depth: Tensor::new(vec![n], points.chunks(3).map(|p| p[2]).collect()).unwrap(),
            pointmap: Tensor::new(vec![n, 3], points).unwrap(),
            confidence: Tensor::new(vec![n], conf).unwrap(),
            pose: PosePrediction { quat: Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]), trans: Tensor::zeros(&[3]) },
        }
    }

    #[test]
    fn identity_pose_keeps_confident_rows() {
        let pred = prediction(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2.0, 1.2]);
        let img = ImageFrame::new(1, 2, vec![1.0, 0.0, 0.5, 0.2, 0.2, 0.2], 0.0, 0).unwrap();
        let pts = fuse_pointcloud(&[pred], &[SE3Pose::identity()], &[img], CONFIDENCE_THRESHOLD).unwrap();
        assert_eq!(pts, vec![ColoredPoint { position: [1.0, 2.0, 3.0], color: [255, 0, 128] }]);
    }

    #[test]
    fn ply_round_trip_and_header_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<ColoredPoint> = (0..37)
            .map(|_| ColoredPoint { position: [rng.random(), rng.random(), rng.random()], color: [rng.random(), rng.random(), rng.random()] })
            .collect();
        let mut buf = Vec::new();
        write_ply(&pts, &mut buf).unwrap();
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert!(String::from_utf8_lossy(&buf[..header_end]).contains("element vertex 37\n"));
        assert_eq!(buf.len() - header_end, 37 * 15);
        assert_eq!(read_ply(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn ascii_ply_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty double x\nproperty double y\n\
                    property double z\nproperty float nx\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    1 2 3 0\n4 5 6 1\n";
        let pts = read_ply(text.as_bytes()).unwrap();
        assert_eq!(pts[1].position, [4.0, 5.0, 6.0]);
        assert_eq!(pts[0].color, [0, 0, 0]);
        assert!(matches!(read_ply(&b"ply\nformat binary_big_endian 1.0\nend_header\n"[..]), Err(Error::Format(_))));
        let short = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n\0\0\0\0";
        assert!(matches!(read_ply(&short[..]), Err(Error::Format(_))));
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\ntau = 0.1\n\nperiod=8  # trailing\n").unwrap();
        assert_eq!(kv, vec![("tau".into(), "0.1".into()), ("period".into(), "8".into())]);
        assert!(matches!(parse_key_values("tau 0.1"), Err(Error::Config(_))));
        assert!(matches!(parse_key_values("a = 1\na = 2"), Err(Error::Config(_))));
    }
}
