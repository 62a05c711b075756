//! Global refinement: full attention over all map tokens, the trigger
//! policy, and cache write-back into the frontend state.

use crate::attention::{AttentionMask, FrameLayout, KVCache};
use crate::error::{ensure, Result};
use crate::frontend::TokenMapState;
use crate::model::{MapTokens, SlamFormer, TokenOrigin};
use crate::tensor::{Real, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendConfig {
    /// Keyframes between mid-run refinements.
    pub trigger_period: usize,
    pub run_mid: bool,
    pub run_end: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { trigger_period: 8, run_mid: true, run_end: true }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.run_mid || self.trigger_period >= 1, Config, "trigger period must be at least 1");
        Ok(())
    }
}

pub fn should_trigger(keyframes_since_last: usize, cfg: &BackendConfig) -> bool {
    cfg.run_mid && keyframes_since_last >= cfg.trigger_period
}

/// Refined map tokens `M̄` with their K/V blocks, in the input order.
#[derive(Debug, Clone)]
pub struct Refinement<S: Real = f32> {
    pub map: Vec<MapTokens<S>>,
    pub cache: KVCache<S>,
}

/// Re-entry of every map token, one full-attention backbone pass.
/// Returns `None` (with a notice) for fewer than two tokens.
pub fn refine_map<S: Real>(model: &SlamFormer<S>, map: &[MapTokens<S>]) -> Result<Option<Refinement<S>>> {
    if map.len() < 2 {
        log::info!("backend skipped: {} map token set(s), need at least 2", map.len());
        return Ok(None);
    }
    let tape = Tape::no_grad();
    let tokens = map.iter().map(|m| model.reenter_map_tokens(&tape, m)).collect::<Result<Vec<_>>>()?;
    let layout = FrameLayout::new(model.config().tokens_per_frame(), map.len());
    let out = model.backbone_forward(&tape, &tokens, &AttentionMask::full(layout), None)?;
    let cfg = model.config();
    let mut cache = KVCache::new(cfg.layers, cfg.heads);
    let mut refined = Vec::with_capacity(map.len());
    let mut change = 0.0;
    for ((m, tokens), blocks) in map.iter().zip(out.tokens).zip(out.blocks) {
        change += tokens.max_abs_diff(&m.tokens);
        cache.append(m.frame_index, blocks)?;
        refined.push(MapTokens { tokens, frame_index: m.frame_index, origin: TokenOrigin::Backend });
    }
    log::debug!("backend refined {} frames, mean max-abs token change {:.3e}", map.len(), change / map.len() as f64);
    Ok(Some(Refinement { map: refined, cache }))
}

/// Replace the state's cache prefix and the matching map entries with the
/// backend's. Validated fully before anything is written.
pub fn share_cache<S: Real>(state: &mut TokenMapState<S>, refinement: &Refinement<S>) -> Result<()> {
    let n = refinement.map.len();
    ensure!(n == refinement.cache.num_frames(), Contract, "refinement has {} tokens but {} cache frames", n, refinement.cache.num_frames());
    ensure!(n <= state.map.len(), Bounds, "refinement of {} frames for a map of {}", n, state.map.len());
    ensure!(
        refinement.map.iter().zip(&state.keyframes).all(|(m, &k)| m.frame_index == k),
        Contract,
        "refined frames are not a prefix of the keyframe set"
    );
    state.cache.replace_prefix(&refinement.cache)?;
    for (dst, src) in state.map.iter_mut().zip(&refinement.map) {
        *dst = src.clone();
    }
    Ok(())
}

/// How the backend turns the current map into a refinement.
pub trait Refiner<S: Real> {
    fn refine(&self, model: &SlamFormer<S>, state: &TokenMapState<S>) -> Result<Option<Refinement<S>>>;
}

/// The real backend: [`refine_map`] over every processed keyframe.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullAttentionRefiner;

impl<S: Real> Refiner<S> for FullAttentionRefiner {
    fn refine(&self, model: &SlamFormer<S>, state: &TokenMapState<S>) -> Result<Option<Refinement<S>>> {
        refine_map(model, &state.map)
    }
}

/// Hands back the current map and cache unchanged; isolates the backend's
/// effect in ablation comparisons.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl<S: Real> Refiner<S> for IdentityRefiner {
    fn refine(&self, _model: &SlamFormer<S>, state: &TokenMapState<S>) -> Result<Option<Refinement<S>>> {
        Ok(Some(Refinement { map: state.map.clone(), cache: state.cache.clone() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::frontend::{initialize_map, track_and_map};
    use crate::model::{ImageFrame, ModelConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, frames: usize) -> (SlamFormer<f32>, Vec<ImageFrame>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SlamFormer::new(ModelConfig::default(), &mut rng).unwrap();
        let frames = (0..frames)
            .map(|i| ImageFrame::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect(), i as f64, i).unwrap())
            .collect();
        (model, frames)
    }

    fn tracked(model: &SlamFormer<f32>, frames: &[ImageFrame]) -> TokenMapState<f32> {
        let (mut state, _) = initialize_map(model, &frames[0], &frames[1]).unwrap();
        for f in &frames[2..] {
            track_and_map(model, f, &mut state).unwrap();
        }
        state
    }

    #[test]
    fn trigger_policy() {
        let cfg = BackendConfig { trigger_period: 8, run_mid: true, run_end: false };
        assert!(!should_trigger(7, &cfg));
        assert!(should_trigger(8, &cfg));
        let off = BackendConfig { run_mid: false, ..cfg };
        assert!((0..40).all(|c| !should_trigger(c, &off)));
        assert!(matches!(BackendConfig { trigger_period: 0, ..cfg }.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn refine_two_and_skip_one() {
        let (model, frames) = setup(1, 2);
        let state = tracked(&model, &frames);
        let r = refine_map(&model, &state.map).unwrap().unwrap();
        assert_eq!(r.cache.num_frames(), 2);
        assert!(r.map.iter().all(|m| m.origin == TokenOrigin::Backend));
        assert!(refine_map(&model, &state.map[..1]).unwrap().is_none());
    }

    #[test]
    fn refinement_is_permutation_equivariant() {
        let m64 = SlamFormer::<f64>::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map: Vec<MapTokens<f64>> = (0..4)
            .map(|i| MapTokens { tokens: Tensor::randn(&[18, 64], 1.0, &mut rng), frame_index: i, origin: TokenOrigin::Frontend })
            .collect();
        let a = refine_map(&m64, &map).unwrap().unwrap();
        let perm = [3, 1, 0, 2];
        let permuted: Vec<_> = perm.iter().map(|&i| map[i].clone()).collect();
        let b = refine_map(&m64, &permuted);
        // Frame ids must increase in a cache, so the permuted run fails at
        // cache assembly; compare the backbone outputs directly instead.
        assert!(matches!(b, Err(Error::Ordering(_))));
        let tape = Tape::no_grad();
        let toks: Vec<_> = permuted.iter().map(|m| m64.reenter_map_tokens(&tape, m).unwrap()).collect();
        let out = m64.backbone_forward(&tape, &toks, &AttentionMask::full(FrameLayout::new(18, 4)), None).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!(out.tokens[j].max_abs_diff(&a.map[i].tokens) < 1e-6);
        }
    }

    #[test]
    fn full_share_equals_backend_cache() {
        let (model, frames) = setup(4, 4);
        let mut state = tracked(&model, &frames);
        let r = refine_map(&model, &state.map).unwrap().unwrap();
        share_cache(&mut state, &r).unwrap();
        assert!(state.cache.bitwise_eq(&r.cache));
        assert!(state.is_consistent());
        assert!(state.map.iter().all(|m| m.origin == TokenOrigin::Backend));
    }

    #[test]
    fn partial_share_leaves_suffix_and_rejects_non_prefix() {
        let (model, frames) = setup(5, 5);
        let mut state = tracked(&model, &frames);
        let before = state.clone();
        let r = refine_map(&model, &state.map[..3]).unwrap().unwrap();
        share_cache(&mut state, &r).unwrap();
        for l in 0..4 {
            for f in 3..5 {
                assert!(state.cache.layer(l).unwrap()[f].k.bitwise_eq(&before.cache.layer(l).unwrap()[f].k));
            }
        }
        assert_eq!(state.cache.frame_ids(), before.cache.frame_ids());
        let shifted = refine_map(&model, &before.map[1..4]).unwrap().unwrap();
        let mut s2 = before.clone();
        assert!(matches!(share_cache(&mut s2, &shifted), Err(Error::Contract(_))));
        assert!(s2.cache.bitwise_eq(&before.cache));
    }

    #[test]
    fn identity_share_is_bitwise_neutral() {
        let (model, frames) = setup(6, 5);
        let mut a = tracked(&model, &frames[..4]);
        let mut b = a.clone();
        let r = IdentityRefiner.refine(&model, &b).unwrap().unwrap();
        share_cache(&mut b, &r).unwrap();
        let pa = track_and_map(&model, &frames[4], &mut a).unwrap();
        let pb = track_and_map(&model, &frames[4], &mut b).unwrap();
        assert!(pa.pointmap.bitwise_eq(&pb.pointmap) && pa.pose.quat.bitwise_eq(&pb.pose.quat));
    }

    #[test]
    fn marker_in_backend_blocks_reaches_next_frame() {
        let (model, frames) = setup(7, 5);
        let base = tracked(&model, &frames[..4]);
        let r = refine_map(&model, &base.map).unwrap().unwrap();
        let mut clean = base.clone();
        share_cache(&mut clean, &r).unwrap();
        let mut marked_r = r.clone();
        let mut blocks = Vec::new();
        for l in 0..4 {
            let b = &r.cache.layer(l).unwrap()[0];
            let v: Vec<f32> = b.v.data().iter().map(|x| x + 0.5).collect();
            blocks.push(crate::attention::KvBlock::new(b.k.clone(), Tensor::new(b.v.shape().to_vec(), v).unwrap()));
        }
        let mut marked_cache = KVCache::new(4, 4);
        marked_cache.append(0, blocks).unwrap();
        for f in 1..4 {
            marked_cache.append(f, (0..4).map(|l| r.cache.layer(l).unwrap()[f].clone()).collect()).unwrap();
        }
        marked_r.cache = marked_cache;
        let mut marked = base.clone();
        share_cache(&mut marked, &marked_r).unwrap();
        let pc = track_and_map(&model, &frames[4], &mut clean).unwrap();
        let pm = track_and_map(&model, &frames[4], &mut marked).unwrap();
        assert!(pc.pointmap.max_abs_diff(&pm.pointmap) > 1e-4);
    }

    #[test]
    fn share_then_track_equals_mixed_batch() {
        let (model, frames) = setup(8, 5);
        let mut state = tracked(&model, &frames[..4]);
        let r = refine_map(&model, &state.map).unwrap().unwrap();
        let tape = Tape::no_grad();
        let mut toks: Vec<_> = state.map.iter().map(|m| model.reenter_map_tokens(&tape, m).unwrap()).collect();
        toks.push(model.encode_image(&tape, &frames[4]).unwrap());
        let mixed = model
            .backbone_forward(&tape, &toks, &AttentionMask::mixed(FrameLayout::new(18, 5), 4).unwrap(), None)
            .unwrap();
        share_cache(&mut state, &r).unwrap();
        track_and_map(&model, &frames[4], &mut state).unwrap();
        assert!(state.map[4].tokens.max_abs_diff(&mixed.tokens[4]) < 1e-5);
    }
}
