//! TUM RGB-D directory loader: `rgb.txt`, `groundtruth.txt`, optional
//! `depth.txt`, images downscaled to the model resolution.

use std::path::Path;

use image::imageops::FilterType;

use super::{Intrinsics, SequenceSource, SourceKind};
use crate::error::{Error, Result};
use crate::eval::{associate, ASSOCIATION_WINDOW};
use crate::geometry::SE3Pose;
use crate::model::{ImageFrame, ModelConfig};

/// Depth PNG units per metre.
const DEPTH_SCALE: f64 = 5000.0;
/// Default Freiburg intrinsics at 640×480.
const FULL_RES: (f64, f64) = (640.0, 480.0);
const FULL_K: Intrinsics = Intrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5 };

fn read_list(path: &Path, min_fields: usize) -> Result<Vec<(f64, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < min_fields {
            return Err(Error::Format(format!("{}:{}: expected {} fields", path.display(), n + 1, min_fields)));
        }
        let t = f[0].parse::<f64>().map_err(|_| Error::Format(format!("{}:{}: bad timestamp", path.display(), n + 1)))?;
        out.push((t, f[1..].iter().map(|s| s.to_string()).collect()));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

fn load_rgb(path: &Path, h: usize, w: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    Ok(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

/// Nearest-neighbour downscale so invalid zeros never blend into valid
/// depths.
fn load_depth(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let img = image::open(path)?.to_luma16();
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let x = ((u as f64 + 0.5) * iw as f64 / w as f64) as usize;
            let y = ((v as f64 + 0.5) * ih as f64 / h as f64) as usize;
            out.push(img.get_pixel(x.min(iw - 1) as u32, y.min(ih - 1) as u32)[0] as f64 / DEPTH_SCALE);
        }
    }
    Ok(out)
}

pub fn load_tum_sequence(dir: &Path, model: &ModelConfig) -> Result<SequenceSource> {
    load_tum_sequence_with_window(dir, model, ASSOCIATION_WINDOW)
}

/// Frames in timestamp order with ground truth associated within `window`
/// seconds; unmatched frames are dropped and counted.
pub fn load_tum_sequence_with_window(dir: &Path, model: &ModelConfig, window: f64) -> Result<SequenceSource> {
    let (h, w) = model.image_hw;
    let rgb = read_list(&dir.join("rgb.txt"), 2)?;
    let gt = read_list(&dir.join("groundtruth.txt"), 8)?;
    let depth_list = dir.join("depth.txt");
    let depth = if depth_list.exists() { Some(read_list(&depth_list, 2)?) } else { None };

    let rgb_t: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let gt_t: Vec<f64> = gt.iter().map(|r| r.0).collect();
    let mut pairs = associate(&rgb_t, &gt_t, window);
    let depth_pairs = depth.as_ref().map(|d| {
        let dt: Vec<f64> = d.iter().map(|r| r.0).collect();
        associate(&rgb_t, &dt, window)
    });
    if let Some(dp) = &depth_pairs {
        pairs.retain(|(i, _)| dp.iter().any(|(j, _)| j == i));
    }
    let dropped = rgb.len() - pairs.len();
    if pairs.is_empty() {
        log::warn!("{}: no rgb frame has ground truth within {:.0} ms; all {} frames dropped", dir.display(), window * 1e3, rgb.len());
    } else if dropped > 0 {
        log::warn!("{}: {} of {} frames dropped without ground truth within {:.0} ms", dir.display(), dropped, rgb.len(), window * 1e3);
    }

    let mut frames = Vec::with_capacity(pairs.len());
    let mut poses = Vec::with_capacity(pairs.len());
    let mut depths = Vec::new();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let (t, ref file) = rgb[i];
        frames.push(ImageFrame::new(h, w, load_rgb(&dir.join(&file[0]), h, w)?, t, k)?);
        let v: Vec<f64> = gt[j].1[..7]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("groundtruth.txt: bad value {s:?}"))))
            .collect::<Result<_>>()?;
        poses.push(SE3Pose::from_wxyz([v[6], v[3], v[4], v[5]], [v[0], v[1], v[2]]));
        if let (Some(d), Some(dp)) = (&depth, &depth_pairs) {
            let (_, di) = dp.iter().find(|(a, _)| *a == i).expect("retained above");
            depths.push(load_depth(&dir.join(&d[*di].1[0]), h, w)?);
        }
    }
    let (sx, sy) = (w as f64 / FULL_RES.0, h as f64 / FULL_RES.1);
    let k = Intrinsics { fx: FULL_K.fx * sx, fy: FULL_K.fy * sy, cx: (FULL_K.cx + 0.5) * sx, cy: (FULL_K.cy + 0.5) * sy };
    let src = SequenceSource {
        kind: SourceKind::TumRgbd,
        frames,
        gt_poses: Some(poses),
        gt_depth: depth.map(|_| depths),
        intrinsics: Some(k),
        dropped_frames: dropped,
    };
    src.validate()?;
    Ok(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    /// Five frames 0.2 s apart, gt offset by `offset` seconds.
    fn fixture(offset: f64, with_depth: bool) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("rgb")).unwrap();
        std::fs::create_dir(dir.path().join("depth")).unwrap();
        let mut rgb = String::from("# color images\n# file: 'mini.bag'\n# timestamp filename\n");
        let mut gt = String::from("# ground truth trajectory\n# timestamp tx ty tz qx qy qz qw\n");
        let mut depth = String::from("# depth maps\n");
        for i in 0..5 {
            let t = 1305031102.0 + i as f64 * 0.2;
            let name = format!("rgb/{t:.6}.png");
            image::RgbImage::from_fn(64, 48, |x, y| image::Rgb([(x * 4) as u8, (y * 5) as u8, (i * 50) as u8]))
                .save(dir.path().join(&name))
                .unwrap();
            writeln!(rgb, "{t:.6} {name}").unwrap();
            writeln!(gt, "{:.4} {} 0.5 -1.25 0 0 0.6 0.8", t + offset, i as f64 * 0.1).unwrap();
            let dname = format!("depth/{t:.6}.png");
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(64, 48, |x, _| image::Luma([if x < 8 { 0 } else { 10000 }]))
                .save(dir.path().join(&dname))
                .unwrap();
            writeln!(depth, "{t:.6} {dname}").unwrap();
        }
        std::fs::write(dir.path().join("rgb.txt"), rgb).unwrap();
        std::fs::write(dir.path().join("groundtruth.txt"), gt).unwrap();
        if with_depth {
            std::fs::write(dir.path().join("depth.txt"), depth).unwrap();
        }
        dir
    }

    fn small() -> ModelConfig {
        ModelConfig { image_hw: (16, 16), ..Default::default() }
    }

    #[test]
    fn mini_fixture_loads_five_frames() {
        let dir = fixture(0.004, true);
        let s = load_tum_sequence(dir.path(), &small()).unwrap();
        assert_eq!((s.frames.len(), s.gt_poses.as_ref().unwrap().len(), s.dropped_frames), (5, 5, 0));
        assert!(s.frames.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        let p = s.gt_poses.as_ref().unwrap()[2];
        assert!((p.translation.x - 0.2).abs() < 1e-12 && (p.wxyz()[3] - 0.6).abs() < 1e-12);
        let d = &s.gt_depth.as_ref().unwrap()[0];
        assert_eq!((d[0], d[15]), (0.0, 2.0));
        assert_eq!(s.frames[0].pixels().len(), 16 * 16 * 3);
        assert_eq!(s.targets(0..5).unwrap().len(), 5);
    }

    #[test]
    fn offset_ground_truth_drops_everything() {
        let dir = fixture(0.05, false);
        let s = load_tum_sequence(dir.path(), &small()).unwrap();
        assert_eq!((s.frames.len(), s.dropped_frames), (0, 5));
        assert!(s.gt_depth.is_none());
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = fixture(0.0, false);
        std::fs::remove_file(dir.path().join("groundtruth.txt")).unwrap();
        assert!(matches!(load_tum_sequence(dir.path(), &small()), Err(Error::Io(_))));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_tum_sequence(empty.path(), &small()), Err(Error::Io(_))));
    }
}
