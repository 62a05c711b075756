//! Online causal operation: keyframe detection by a pair pass, two-frame
//! initialisation, and incremental tracking against the KV cache.

use crate::attention::{AttentionMask, FrameLayout, KVCache};
use crate::error::{ensure, Result};
use crate::geometry::{relative_pose, SE3Pose};
use crate::model::{FramePrediction, ImageFrame, MapTokens, SlamFormer, TokenOrigin};
use crate::tensor::{Real, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    /// Keyframe translation threshold τ.
    pub tau: f64,
    pub max_frames: Option<usize>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { tau: 0.05, max_frames: None }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0 && self.tau.is_finite(), Config, "tau must be positive, got {}", self.tau);
        Ok(())
    }
}

/// The token map `(M, S)` with the frontend's KV cache.
#[derive(Debug, Clone)]
pub struct TokenMapState<S: Real = f32> {
    pub map: Vec<MapTokens<S>>,
    pub keyframes: Vec<usize>,
    pub cache: KVCache<S>,
    pub last_keyframe_image: ImageFrame,
}

impl<S: Real> TokenMapState<S> {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// `|M| = |S| = cache frames`, `S` strictly increasing and matching the
    /// cache ids.
    pub fn is_consistent(&self) -> bool {
        self.map.len() == self.keyframes.len()
            && self.cache.num_frames() == self.keyframes.len()
            && self.cache.frame_ids() == self.keyframes.as_slice()
            && self.keyframes.windows(2).all(|w| w[0] < w[1])
            && self.map.iter().zip(&self.keyframes).all(|(m, &k)| m.frame_index == k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub is_keyframe: bool,
    pub rel_pose: SE3Pose,
}

fn frame_layout<S: Real>(model: &SlamFormer<S>, frames: usize) -> FrameLayout {
    FrameLayout::new(model.config().tokens_per_frame(), frames)
}

/// Pair pass over `(prev, candidate)` without the cache; the candidate is a
/// keyframe when the predicted relative translation exceeds τ.
pub fn detect_keyframe<S: Real>(
    model: &SlamFormer<S>,
    prev: &ImageFrame,
    candidate: &ImageFrame,
    tau: f64,
) -> Result<KeyframeDecision> {
    let tape = Tape::no_grad();
    let tokens = [model.encode_image(&tape, prev)?, model.encode_image(&tape, candidate)?];
    let out = model.backbone_forward(&tape, &tokens, &AttentionMask::causal_full2(frame_layout(model, 2)), None)?;
    let pose = |i: usize| -> Result<SE3Pose> {
        let m = MapTokens { tokens: out.tokens[i].clone(), frame_index: i, origin: TokenOrigin::Frontend };
        Ok(model.pose_head(&tape, &m)?.to_se3())
    };
    let rel_pose = relative_pose(&pose(0)?, &pose(1)?);
    Ok(KeyframeDecision { is_keyframe: rel_pose.translation.norm() > tau, rel_pose })
}

/// Joint pass over the first two keyframes; both caches are stored.
pub fn initialize_map<S: Real>(
    model: &SlamFormer<S>,
    first: &ImageFrame,
    second: &ImageFrame,
) -> Result<(TokenMapState<S>, [FramePrediction<S>; 2])> {
    ensure!(
        first.frame_index < second.frame_index,
        Ordering,
        "keyframe indices must increase ({} then {})",
        first.frame_index,
        second.frame_index
    );
    let tape = Tape::no_grad();
    let tokens = [model.encode_image(&tape, first)?, model.encode_image(&tape, second)?];
    let out = model.backbone_forward(&tape, &tokens, &AttentionMask::causal_full2(frame_layout(model, 2)), None)?;
    let cfg = model.config();
    let mut cache = KVCache::new(cfg.layers, cfg.heads);
    let mut map = Vec::with_capacity(2);
    for ((frame, tokens), blocks) in [first, second].iter().zip(out.tokens).zip(out.blocks) {
        cache.append(frame.frame_index, blocks)?;
        map.push(MapTokens { tokens, frame_index: frame.frame_index, origin: TokenOrigin::Frontend });
    }
    let preds = [model.predict(&tape, &map[0])?, model.predict(&tape, &map[1])?];
    let state = TokenMapState {
        map,
        keyframes: vec![first.frame_index, second.frame_index],
        cache,
        last_keyframe_image: second.clone(),
    };
    Ok((state, preds))
}

/// Causal incremental step for a new keyframe: attend over the cache, then
/// extend `M`, `S` and the cache.
pub fn track_and_map<S: Real>(
    model: &SlamFormer<S>,
    frame: &ImageFrame,
    state: &mut TokenMapState<S>,
) -> Result<FramePrediction<S>> {
    ensure!(state.len() >= 2, Contract, "track_and_map before initialisation");
    ensure!(state.is_consistent(), Contract, "token map and cache are out of sync");
    if let Some(&last) = state.keyframes.last() {
        ensure!(frame.frame_index > last, Ordering, "frame {} does not follow keyframe {}", frame.frame_index, last);
    }
    let tape = Tape::no_grad();
    let tokens = model.encode_image(&tape, frame)?;
    let mask = AttentionMask::causal_full2(frame_layout(model, 1));
    let mut out = model.backbone_forward(&tape, std::slice::from_ref(&tokens), &mask, Some(&state.cache))?;
    let blocks = out.blocks.pop().expect("one frame in, one frame out");
    let tokens = out.tokens.pop().expect("one frame in, one frame out");
    let m = MapTokens { tokens, frame_index: frame.frame_index, origin: TokenOrigin::Frontend };
    let pred = model.predict(&tape, &m)?;
    state.cache.append(frame.frame_index, blocks)?;
    state.map.push(m);
    state.keyframes.push(frame.frame_index);
    state.last_keyframe_image = frame.clone();
    Ok(pred)
}
