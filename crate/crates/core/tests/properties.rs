use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slamformer::attention::{AttentionMask, FrameLayout, KVCache, KvBlock, MaskKind};
use slamformer::backend::{share_cache, Refinement};
use slamformer::eval::{ate_rmse, recon_metrics, AlignMode, NeighborGrid, TimedPose};
use slamformer::frontend::{initialize_map, track_and_map, TokenMapState};
use slamformer::geometry::{scale_objective, solve_scale, umeyama, Point3, SE3Pose};
use slamformer::io::{format_trajectory, parse_trajectory};
use slamformer::losses::{depth_loss, pointmap_loss, FrameTarget};
use slamformer::model::{FramePrediction, ImageFrame, MapTokens, ModelConfig, PosePrediction, SlamFormer, TokenOrigin};
use slamformer::tensor::{Tape, Tensor};

fn quat() -> impl Strategy<Value = UnitQuaternion<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|q| UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])))
}

fn pose() -> impl Strategy<Value = SE3Pose> {
    (quat(), prop::array::uniform3(-5.0f64..5.0)).prop_map(|(q, t)| SE3Pose::new(q, Vector3::from(t)))
}

fn point() -> impl Strategy<Value = Point3> {
    prop::array::uniform3(-3.0f64..3.0)
}

fn close(a: &SE3Pose, b: &SE3Pose, tol: f64) -> bool {
    a.rotation.angle_to(&b.rotation) <= tol && (a.translation - b.translation).norm() <= tol
}

fn traj(points: &[Point3]) -> Vec<TimedPose> {
    points.iter().enumerate().map(|(i, p)| TimedPose { timestamp: i as f64, pose: SE3Pose::from_translation(*p) }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_group_laws(a in pose(), b in pose(), c in pose()) {
        prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-6));
        prop_assert!(close(&a.compose(&a.inverse()), &SE3Pose::identity(), 1e-6));
        prop_assert!((a.compose(&b).quaternion_norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn scale_is_locally_optimal(
        pts in prop::collection::vec((point(), point(), 0.2f64..4.0), 3..40),
    ) {
        let pred: Vec<Point3> = pts.iter().map(|p| p.0).collect();
        let gt: Vec<Point3> = pts.iter().map(|p| p.1).collect();
        let depth: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let s = solve_scale(&pred, &gt, &depth).unwrap().scale;
        prop_assert!(s > 0.0);
        let f = |x: f64| scale_objective(x, &pred, &gt, &depth);
        prop_assert!(f(s) <= f(s + 1e-3) + 1e-12);
        prop_assert!(s <= 1e-3 || f(s) <= f(s - 1e-3) + 1e-12);
    }

    #[test]
    fn umeyama_residual_ignores_common_rigid_motion(
        src in prop::collection::vec(point(), 4..30),
        noise in prop::collection::vec(point(), 30),
        planted in pose(),
        common in pose(),
    ) {
        let dst: Vec<Point3> = src
            .iter()
            .zip(&noise)
            .map(|(p, n)| {
                let q = planted.transform_point(p);
                [2.0 * q[0] + 0.05 * n[0], 2.0 * q[1] + 0.05 * n[1], 2.0 * q[2] + 0.05 * n[2]]
            })
            .collect();
        let residual = |a: &[Point3], b: &[Point3]| {
            let fit = umeyama(a, b, true).unwrap();
            a.iter().zip(b).map(|(x, y)| {
                let z = fit.apply(x);
                (0..3).map(|c| (z[c] - y[c]).powi(2)).sum::<f64>()
            }).sum::<f64>()
        };
        let moved_src: Vec<Point3> = src.iter().map(|p| common.transform_point(p)).collect();
        let moved_dst: Vec<Point3> = dst.iter().map(|p| common.transform_point(p)).collect();
        let (r0, r1) = (residual(&src, &dst), residual(&moved_src, &moved_dst));
        prop_assert!((r0 - r1).abs() <= 1e-9 * r0.max(1.0), "{} vs {}", r0, r1);
    }

    #[test]
    fn masks_follow_their_rules(n in 1usize..=6, p_frac in 0.0f64..=1.0, t in 1usize..4) {
        let p = ((n as f64) * p_frac).round() as usize;
        let layout = FrameLayout::new(t, n);
        for kind in [MaskKind::CausalFull2, MaskKind::Full, MaskKind::Mixed] {
            let mask = AttentionMask::build(kind, layout, Some(p)).unwrap();
            let tokens = mask.token_mask(0..n, 0..n);
            for q in 0..n * t {
                for k in 0..n * t {
                    let (i, j) = (q / t, k / t);
                    let want = match kind {
                        MaskKind::Full => true,
                        MaskKind::CausalFull2 => j <= i || (i, j) == (0, 1),
                        MaskKind::Mixed => if i < p { j < p } else { j <= i },
                    };
                    prop_assert_eq!(tokens[q * n * t + k], want);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_rows(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::uniform(&[rows, cols], -4.0, 4.0, &mut rng);
        // Column 0 stays open so no row is fully masked.
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || (i * 7 + seed as usize) % 3 != 0).collect();
        let y = Tape::no_grad().softmax_rows(&x, Some(&mask)).unwrap();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn trajectory_text_round_trips(poses in prop::collection::vec(pose(), 1..20), t0 in 0.0f64..1000.0) {
        let traj: Vec<TimedPose> = poses.iter().enumerate().map(|(i, p)| TimedPose { timestamp: t0 + i as f64 * 0.05, pose: *p }).collect();
        let text = format_trajectory(&traj);
        let back = parse_trajectory(&text).unwrap();
        prop_assert_eq!(back.len(), traj.len());
        for (a, b) in traj.iter().zip(&back) {
            prop_assert!((a.timestamp - b.timestamp).abs() <= 1e-9);
            prop_assert!(close(&a.pose, &b.pose, 1e-8));
        }
    }

    #[test]
    fn ate_self_zero_and_se3_symmetric(a in prop::collection::vec(point(), 4..30), b in prop::collection::vec(point(), 30)) {
        let pa = traj(&a);
        let pb = traj(&b[..a.len()]);
        prop_assert!(ate_rmse(&pa, &pa, AlignMode::Sim3).unwrap().ate_rmse <= 1e-9);
        let ab = ate_rmse(&pa, &pb, AlignMode::Se3).unwrap().ate_rmse;
        let ba = ate_rmse(&pb, &pa, AlignMode::Se3).unwrap().ate_rmse;
        prop_assert!(ab >= 0.0 && (ab - ba).abs() <= 1e-9, "{} vs {}", ab, ba);
    }

    #[test]
    fn recon_chamfer_identity_and_monotone(
        pred in prop::collection::vec(point(), 1..200),
        gt in prop::collection::vec(point(), 1..200),
        seed in any::<u64>(),
    ) {
        let r = recon_metrics(&pred, &gt, 100_000, seed).unwrap();
        prop_assert!(r.accuracy >= 0.0 && r.completeness >= 0.0);
        prop_assert!((r.chamfer - 0.5 * (r.accuracy + r.completeness)).abs() <= 1e-9);
        // Samples cover both clouds here, so the comparison is deterministic.
        let mut more = pred.clone();
        more.extend_from_slice(&gt);
        let r2 = recon_metrics(&more, &gt, 100_000, seed).unwrap();
        prop_assert!(r2.accuracy <= r.accuracy + 1e-12);
    }

    #[test]
    fn grid_nearest_is_exact(cloud in prop::collection::vec(point(), 1..300), queries in prop::collection::vec(point(), 1..50)) {
        let grid = NeighborGrid::new(&cloud).unwrap();
        for q in &queries {
            let brute = cloud.iter().map(|p| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(grid.nearest(q), brute);
        }
    }

    #[test]
    fn loss_residuals_sit_above_the_regulariser_floor(seed in any::<u64>()) {
        // Adding back α·mean Σ log Σ* leaves only the residual terms.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 4);
        let n = h * w;
        let tape = Tape::<f64>::no_grad();
        let preds: Vec<FramePrediction<f64>> = (0..2).map(|_| {
            let pointmap = Tensor::uniform(&[n, 3], -2.0, 2.0, &mut rng);
            let depth = Tensor::from_vec(pointmap.data().chunks(3).map(|c| c[2]).collect());
            let confidence = Tensor::uniform(&[n], 1.0, 4.0, &mut rng);
            let quat = tape.normalize(&Tensor::uniform(&[4], -1.0, 1.0, &mut rng)).unwrap();
            FramePrediction { pointmap, confidence, depth, pose: PosePrediction { quat, trans: Tensor::uniform(&[3], -1.0, 1.0, &mut rng) } }
        }).collect();
        let targets: Vec<FrameTarget> = (0..2).map(|_| {
            let pts = Tensor::<f64>::uniform(&[n, 3], 0.5, 2.0, &mut rng);
            let pointmap: Vec<Point3> = pts.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let depth = pointmap.iter().map(|p| p[2]).collect();
            FrameTarget::new(h, w, depth, pointmap, SE3Pose::identity()).unwrap()
        }).collect();
        let alpha = 0.2;
        let floor = preds.iter().map(|p| p.confidence.data().iter().map(|c| c.ln()).sum::<f64>()).sum::<f64>() / 2.0;
        let d = depth_loss(&tape, &preds, &targets, 1.3, alpha).unwrap().total.item().unwrap();
        let pm = pointmap_loss(&tape, &preds, &targets, 1.3, alpha).unwrap().total.item().unwrap();
        prop_assert!(d + alpha * floor >= -1e-12 && pm + alpha * floor >= -1e-12);
    }
}

fn block(rng: &mut ChaCha8Rng, t: usize, d: usize) -> KvBlock {
    KvBlock::new(Tensor::uniform(&[t, d], -1.0, 1.0, rng), Tensor::uniform(&[t, d], -1.0, 1.0, rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn share_keeps_cache_shape_and_ids(frames in 2usize..8, prefix_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, heads, t, d) = (3, 2, 4, 8);
        let ids: Vec<usize> = (0..frames).map(|i| i * 3 + 1).collect();
        let mut cache = KVCache::new(layers, heads);
        for &id in &ids {
            cache.append(id, (0..layers).map(|_| block(&mut rng, t, d)).collect()).unwrap();
        }
        let map: Vec<MapTokens> = ids.iter().map(|&i| MapTokens { tokens: Tensor::zeros(&[t, d]), frame_index: i, origin: TokenOrigin::Frontend }).collect();
        let image = ImageFrame::new(1, 1, vec![0.0; 3], 0.0, 0).unwrap();
        let mut state = TokenMapState { map, keyframes: ids.clone(), cache, last_keyframe_image: image };
        let n = ((frames as f64 * prefix_frac).round() as usize).max(1);
        let mut refined = KVCache::new(layers, heads);
        for &id in &ids[..n] {
            refined.append(id, (0..layers).map(|_| block(&mut rng, t, d)).collect()).unwrap();
        }
        let r_map = ids[..n].iter().map(|&i| MapTokens { tokens: Tensor::ones(&[t, d]), frame_index: i, origin: TokenOrigin::Backend }).collect();
        let before = state.cache.clone();
        share_cache(&mut state, &Refinement { map: r_map, cache: refined.clone() }).unwrap();
        prop_assert!(state.is_consistent());
        prop_assert_eq!(state.cache.num_frames(), frames);
        prop_assert_eq!(state.cache.frame_ids(), ids.as_slice());
        for l in 0..layers {
            for f in 0..frames {
                let (now, was) = (&state.cache.layer(l).unwrap()[f], &before.layer(l).unwrap()[f]);
                prop_assert_eq!(now.k.shape(), was.k.shape());
                let expected = if f < n { &refined.layer(l).unwrap()[f] } else { was };
                prop_assert!(now.k.bitwise_eq(&expected.k) && now.v.bitwise_eq(&expected.v));
            }
        }
        prop_assert!(state.map.iter().take(n).all(|m| m.origin == TokenOrigin::Backend));
        prop_assert!(state.map.iter().skip(n).all(|m| m.origin == TokenOrigin::Frontend));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn future_frames_never_change_past_outputs(seed in any::<u64>(), n in 3usize..6, extra in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model: SlamFormer = SlamFormer::new(ModelConfig::default(), &mut rng).unwrap();
        let frames: Vec<ImageFrame> = (0..n + extra)
            .map(|i| {
                let px = Tensor::<f32>::uniform(&[32 * 32 * 3], 0.0, 1.0, &mut rng).data().to_vec();
                ImageFrame::new(32, 32, px, i as f64, i).unwrap()
            })
            .collect();
        let run = |k: usize| {
            let (mut state, _) = initialize_map(&model, &frames[0], &frames[1]).unwrap();
            for f in &frames[2..k] {
                track_and_map(&model, f, &mut state).unwrap();
                assert!(state.is_consistent());
            }
            state
        };
        let (short, long) = (run(n), run(n + extra));
        for i in 0..n {
            prop_assert!(short.map[i].tokens.bitwise_eq(&long.map[i].tokens));
        }
    }
}
