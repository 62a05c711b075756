use super::*;
use crate::error::Error;
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn random_traj(n: usize, rng: &mut ChaCha8Rng) -> Vec<TimedPose> {
    (0..n)
        .map(|i| {
            let t: [f64; 3] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
            let q = UnitQuaternion::from_scaled_axis(axis);
            TimedPose { timestamp: i as f64 * 0.1, pose: SE3Pose::new(q, t.into()) }
        })
        .collect()
}

fn brute_nearest(points: &[Point3], q: &Point3) -> f64 {
    points.iter().map(|p| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min).sqrt()
}

fn cube_grid(n: usize, spacing: f64) -> Vec<Point3> {
    let mut pts = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                pts.push([x as f64 * spacing, y as f64 * spacing, z as f64 * spacing]);
            }
        }
    }
    pts
}

#[test]
fn association_is_one_to_one_and_windowed() {
    let a = [0.0, 0.1, 0.2, 0.3];
    let b = [0.005, 0.101, 0.195, 0.31];
    assert_eq!(associate(&a, &b, 0.02), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    let shifted: Vec<f64> = a.iter().map(|t| t + 0.05).collect();
    assert!(associate(&a, &shifted, 0.02).is_empty());
    // Two queries competing for one target: the closer wins.
    assert_eq!(associate(&[1.0, 1.004], &[1.003], 0.02), vec![(1, 0)]);
}

#[test]
fn identical_trajectories_have_zero_error() {
    let traj = random_traj(20, &mut ChaCha8Rng::seed_from_u64(1));
    for mode in [AlignMode::Sim3, AlignMode::Se3] {
        let e = ate_rmse(&traj, &traj, mode).unwrap();
        assert!(e.ate_rmse < 1e-9);
        assert_eq!(e.matched_pairs, 20);
    }
}

#[test]
fn scaled_trajectory_vanishes_under_sim3() {
    let gt = random_traj(30, &mut ChaCha8Rng::seed_from_u64(2));
    let pred: Vec<TimedPose> = gt
        .iter()
        .map(|p| TimedPose { timestamp: p.timestamp, pose: SE3Pose::new(p.pose.rotation, p.pose.translation * 3.0) })
        .collect();
    let e = ate_rmse(&pred, &gt, AlignMode::Sim3).unwrap();
    assert!(e.ate_rmse < 1e-9);
    assert!((e.alignment.scale - 1.0 / 3.0).abs() < 1e-9);
    assert!(ate_rmse(&pred, &gt, AlignMode::Se3).unwrap().ate_rmse > 0.1);
}

#[test]
fn se3_ate_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_traj(25, &mut rng);
    let b = random_traj(25, &mut rng);
    let ab = ate_rmse(&a, &b, AlignMode::Se3).unwrap().ate_rmse;
    let ba = ate_rmse(&b, &a, AlignMode::Se3).unwrap().ate_rmse;
    assert!((ab - ba).abs() < 1e-9);
}

#[test]
fn isotropic_noise_gives_sigma_sqrt3() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_traj(1000, &mut rng);
    let sigma = 0.01;
    let noise = Normal::new(0.0, sigma).unwrap();
    let pred: Vec<TimedPose> = gt
        .iter()
        .map(|p| {
            let n = Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            TimedPose { timestamp: p.timestamp, pose: SE3Pose::new(p.pose.rotation, p.pose.translation + n) }
        })
        .collect();
    let e = ate_rmse(&pred, &gt, AlignMode::Sim3).unwrap();
    let expect = sigma * 3f64.sqrt();
    assert!((e.ate_rmse - expect).abs() < 0.1 * expect, "{} vs {}", e.ate_rmse, expect);
}

#[test]
fn too_few_matches_is_an_error() {
    let traj = random_traj(2, &mut ChaCha8Rng::seed_from_u64(5));
    assert!(matches!(ate_rmse(&traj, &traj, AlignMode::Sim3), Err(Error::Evaluation(_))));
    let a = random_traj(5, &mut ChaCha8Rng::seed_from_u64(6));
    let late: Vec<TimedPose> = a.iter().map(|p| TimedPose { timestamp: p.timestamp + 0.05, ..*p }).collect();
    assert!(matches!(ate_rmse(&a, &late, AlignMode::Sim3), Err(Error::Evaluation(_))));
}

#[test]
fn collinear_trajectory_is_a_rank_error() {
    let line: Vec<TimedPose> = (0..10)
        .map(|i| TimedPose { timestamp: i as f64, pose: SE3Pose::from_translation([i as f64, 0.0, 0.0]) })
        .collect();
    assert!(matches!(ate_rmse(&line, &line, AlignMode::Sim3), Err(Error::Rank(_))));
}

#[test]
fn grid_nearest_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clouds: Vec<Vec<Point3>> = vec![
        (0..2000).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        (0..1500).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), 2.0]).collect(),
        (0..800)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 10.0 };
                [c + rng.random::<f64>() * 0.01, rng.random::<f64>() * 0.01, c]
            })
            .collect(),
        vec![[1.0, 2.0, 3.0]],
    ];
    for cloud in &clouds {
        let grid = NeighborGrid::new(cloud).unwrap();
        for _ in 0..300 {
            let q = [rng.random_range(-5.0..12.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..12.0)];
            assert_eq!(grid.nearest(&q), brute_nearest(cloud, &q));
        }
        for p in cloud.iter().take(50) {
            assert_eq!(grid.nearest(p), 0.0);
        }
    }
}

#[test]
fn identical_clouds_score_zero() {
    let cloud = cube_grid(6, 0.2);
    let r = recon_metrics(&cloud, &cloud, 1000, 0).unwrap();
    assert_eq!((r.accuracy, r.completeness, r.chamfer), (0.0, 0.0, 0.0));
}

#[test]
fn shifted_cube_accuracy_equals_shift() {
    let gt = cube_grid(11, 0.1);
    let d = 0.01;
    let pred: Vec<Point3> = gt.iter().map(|p| [p[0] + d, p[1], p[2]]).collect();
    let r = recon_metrics(&pred, &gt, DEFAULT_SAMPLES, 1).unwrap();
    assert!((r.accuracy - d).abs() < 1e-12);
    assert!((r.completeness - d).abs() < 1e-12);
    assert!((r.chamfer - 0.5 * (r.accuracy + r.completeness)).abs() < 1e-9);
}

#[test]
fn subset_prediction_is_accurate_but_incomplete() {
    let gt = cube_grid(8, 0.1);
    let pred: Vec<Point3> = gt.iter().step_by(2).copied().collect();
    let r = recon_metrics(&pred, &gt, DEFAULT_SAMPLES, 2).unwrap();
    assert_eq!(r.accuracy, 0.0);
    assert!(r.completeness > 0.0);
}

#[test]
fn adding_gt_points_never_hurts_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = cube_grid(6, 0.2);
    for _ in 0..5 {
        let pred: Vec<Point3> = (0..300).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let before = recon_metrics(&pred, &gt, DEFAULT_SAMPLES, 3).unwrap();
        let mut more = pred.clone();
        more.extend_from_slice(&gt[..100]);
        let after = recon_metrics(&more, &gt, DEFAULT_SAMPLES, 3).unwrap();
        assert!(after.accuracy <= before.accuracy);
    }
}

#[test]
fn subsampling_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<Point3> = (0..3000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let b: Vec<Point3> = (0..3000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let r1 = recon_metrics(&a, &b, 500, 11).unwrap();
    let r2 = recon_metrics(&a, &b, 500, 11).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.samples, 500);
    assert!(matches!(recon_metrics(&a, &[], 10, 0), Err(Error::Evaluation(_))));
}

#[test]
fn single_call_timing() {
    let log = TimingLog { frontend: vec![Duration::from_millis(10)], frames: 1, wall: Duration::from_millis(10), ..Default::default() };
    let r = timing_summary(&log);
    assert_eq!(r.frontend_ms, Some(10.0));
    assert_eq!(r.kf_detection_ms, None);
    assert_eq!(r.fps, 100.0);
}

#[test]
fn scripted_clock_gives_exact_means() {
    let ms = Duration::from_millis;
    let clock = ScriptedClock::new([ms(0), ms(4), ms(10), ms(16), ms(20), ms(50)]);
    let mut log = TimingLog::default();
    log.time(&clock, Stage::KfDetection, || ());
    log.time(&clock, Stage::KfDetection, || ());
    log.time(&clock, Stage::Backend, || ());
    log.frames = 4;
    log.wall = ms(400);
    let r = timing_summary(&log);
    assert_eq!(r.kf_detection_ms, Some(5.0));
    assert_eq!(r.backend_ms, Some(30.0));
    assert_eq!(r.fps, 10.0);
    assert_eq!(clock.now(), ms(50));
}

fn fixture_report() -> EvalReport {
    let gt: Vec<TimedPose> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.5]]
        .iter()
        .enumerate()
        .map(|(i, t)| TimedPose { timestamp: i as f64, pose: SE3Pose::from_translation(*t) })
        .collect();
    let pred: Vec<TimedPose> = gt
        .iter()
        .map(|p| TimedPose { timestamp: p.timestamp + 0.001, pose: SE3Pose::new(p.pose.rotation, p.pose.translation * 2.0) })
        .collect();
    let traj = ate_rmse(&pred, &gt, AlignMode::Sim3).unwrap();
    let cube = cube_grid(3, 1.0);
    let shifted: Vec<Point3> = cube.iter().map(|p| [p[0], p[1], p[2] + 0.25]).collect();
    let log = TimingLog {
        kf_detection: vec![Duration::from_millis(89)],
        frontend: vec![Duration::from_millis(97)],
        backend: vec![Duration::from_millis(187)],
        frames: 54,
        wall: Duration::from_secs(5),
    };
    EvalReport {
        recon: Some(recon_metrics(&shifted, &cube, 100, 0).unwrap()),
        timing: Some(timing_summary(&log)),
        ..Default::default()
    }
    .with_trajectory(&traj, AlignMode::Sim3)
}

#[test]
fn report_matches_golden_files() {
    let r = fixture_report();
    assert_eq!(r.to_kv_text(), include_str!("../../tests/golden/eval_report.txt"));
    assert_eq!(r.to_json() + "\n", include_str!("../../tests/golden/eval_report.json"));
}
