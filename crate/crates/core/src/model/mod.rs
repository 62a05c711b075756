//! The unified transformer: toy patch encoder, L blocks of intra-frame and
//! inter-frame attention, map-token re-entry and the pose / pointmap heads.

mod checkpoint;

use std::sync::Arc;

use rand::Rng;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::attention::{scaled_dot_product, AttentionMask, AttentionWeights, KVCache, KvBlock};
use crate::error::{ensure, Result};
use crate::geometry::SE3Pose;
use crate::nn::{join, LayerNorm, Linear, Mlp, Params};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch: usize,
    pub registers: usize,
    pub image_hw: (usize, usize),
    pub token_type_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 4, d_model: 64, heads: 4, patch: 8, registers: 2, image_hw: (32, 32), token_type_embedding: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        ensure!(self.layers > 0, Config, "model needs at least one layer");
        ensure!(self.patch > 0 && h > 0 && w > 0, Config, "empty image or patch size");
        ensure!(h % self.patch == 0 && w % self.patch == 0, Config, "image {}x{} not divisible by patch {}", h, w, self.patch);
        ensure!(
            self.heads > 0 && self.d_model % self.heads == 0,
            Config,
            "d_model {} not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(self.registers > 0, Config, "at least one register token is required by the pose head");
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch, self.image_hw.1 / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.num_patches() + self.registers
    }

    pub fn num_pixels(&self) -> usize {
        self.image_hw.0 * self.image_hw.1
    }
}

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
    pub timestamp: f64,
    pub frame_index: usize,
}

impl ImageFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, timestamp: f64, frame_index: usize) -> Result<Self> {
        ensure!(pixels.len() == height * width * 3, Dimension, "{} values for a {}x{} RGB image", pixels.len(), height, width);
        ensure!(pixels.iter().all(|p| (0.0..=1.0).contains(p)), Bounds, "pixel values must lie in [0, 1]");
        Ok(Self { height, width, pixels, timestamp, frame_index })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Frontend,
    Backend,
}

/// Per-keyframe scene representation: the backbone's output tokens.
#[derive(Debug, Clone)]
pub struct MapTokens<S: Real = f32> {
    pub tokens: Tensor<S>,
    pub frame_index: usize,
    pub origin: TokenOrigin,
}

/// Tokens entering the backbone for one frame, `[tokens_per_frame × d]`.
pub type FrameTokens<S> = Tensor<S>;

/// Pose as predicted by the head: unit `(w, x, y, z)` quaternion and
/// translation, both kept on the tape for the losses.
#[derive(Debug, Clone)]
pub struct PosePrediction<S: Real = f32> {
    pub quat: Tensor<S>,
    pub trans: Tensor<S>,
}

impl<S: Real> PosePrediction<S> {
    pub fn to_se3(&self) -> SE3Pose {
        let q = self.quat.to_f64_vec();
        let t = self.trans.to_f64_vec();
        SE3Pose::from_wxyz([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
    }
}

#[derive(Debug, Clone)]
pub struct FramePrediction<S: Real = f32> {
    /// Camera-local points `[H·W × 3]`.
    pub pointmap: Tensor<S>,
    /// `Σ* = 1 + exp(c)`, `[H·W]`.
    pub confidence: Tensor<S>,
    /// `P*_z`, `[H·W]`.
    pub depth: Tensor<S>,
    pub pose: PosePrediction<S>,
}

/// Outputs of [`SlamFormer::backbone_forward`].
#[derive(Debug, Clone)]
pub struct BackboneOutput<S: Real = f32> {
    pub tokens: Vec<Tensor<S>>,
    /// `blocks[frame][layer]`: K/V entering inter-frame attention.
    pub blocks: Vec<Vec<KvBlock<S>>>,
}

#[derive(Debug, Clone)]
pub struct Block<S: Real = f32> {
    pub ln_intra: LayerNorm<S>,
    pub intra: AttentionWeights<S>,
    pub ln_inter: LayerNorm<S>,
    pub inter: AttentionWeights<S>,
    pub ln_mlp: LayerNorm<S>,
    pub mlp: Mlp<S>,
}

impl<S: Real> Params<S> for Block<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.ln_intra.visit(&join(prefix, "ln_intra"), f);
        self.intra.visit(&join(prefix, "intra"), f);
        self.ln_inter.visit(&join(prefix, "ln_inter"), f);
        self.inter.visit(&join(prefix, "inter"), f);
        self.ln_mlp.visit(&join(prefix, "ln_mlp"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.ln_intra.visit_mut(&join(prefix, "ln_intra"), f);
        self.intra.visit_mut(&join(prefix, "intra"), f);
        self.ln_inter.visit_mut(&join(prefix, "ln_inter"), f);
        self.inter.visit_mut(&join(prefix, "inter"), f);
        self.ln_mlp.visit_mut(&join(prefix, "ln_mlp"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

const CONF_RAW_RANGE: (f64, f64) = (-15.0, 60.0);

#[derive(Debug, Clone)]
pub struct SlamFormer<S: Real = f32> {
    cfg: ModelConfig,
    pub patch_embed: Linear<S>,
    pub pos_embed: Tensor<S>,
    pub registers: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub reentry: Linear<S>,
    pub type_embed: Tensor<S>,
    pub final_norm: LayerNorm<S>,
    pub pose_head: Mlp<S>,
    pub point_head: Mlp<S>,
    unfold: Arc<Vec<usize>>,
}

impl<S: Real> SlamFormer<S> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p = cfg.patch;
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln_intra: LayerNorm::new(d),
                intra: AttentionWeights::random(d, rng),
                ln_inter: LayerNorm::new(d),
                inter: AttentionWeights::random(d, rng),
                ln_mlp: LayerNorm::new(d),
                mlp: Mlp::random(d, 4 * d, d, rng),
            })
            .collect();
        let mut pose_head = Mlp::random(d, d, 7, rng);
        pose_head.fc2.weight = Tensor::randn(&[d, 7], 0.01, rng);
        pose_head.fc2.bias = Tensor::from_vec([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0].map(S::lit).to_vec());
        let out = p * p * 4;
        let mut point_head = Mlp::random(d, d, out, rng);
        point_head.fc2.weight = Tensor::randn(&[d, out], 0.01, rng);
        let bias: Vec<S> = (0..out).map(|i| if i % 4 == 2 { S::one() } else { S::zero() }).collect();
        point_head.fc2.bias = Tensor::from_vec(bias);
        Ok(Self {
            cfg,
            patch_embed: Linear::random(p * p * 3, d, rng),
            pos_embed: Tensor::randn(&[cfg.num_patches(), d], 0.1, rng),
            registers: Tensor::randn(&[cfg.registers, d], 0.1, rng),
            blocks,
            reentry: Linear::identity(d),
            type_embed: Tensor::randn(&[d], 0.1, rng),
            final_norm: LayerNorm::new(d),
            pose_head,
            point_head,
            unfold: Arc::new(unfold_indices(&cfg)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Copy whose parameters are leaves of `tape`.
    pub fn tracked(&self, tape: &Tape<S>) -> Self {
        let mut copy = self.clone();
        copy.visit_mut("", &mut |_, t| *t = tape.leaf(t));
        copy
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Patchify, project, add positions, append the shared registers.
    pub fn encode_image(&self, tape: &Tape<S>, frame: &ImageFrame) -> Result<FrameTokens<S>> {
        let (h, w) = self.cfg.image_hw;
        ensure!(
            frame.height == h && frame.width == w,
            Config,
            "image is {}x{}, model expects {}x{}",
            frame.height,
            frame.width,
            h,
            w
        );
        let p = self.cfg.patch;
        let (gh, gw) = self.cfg.grid();
        let px = frame.pixels();
        let mut patches = Vec::with_capacity(gh * gw * p * p * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..p {
                    let row = ((gy * p + y) * w + gx * p) * 3;
                    patches.extend(px[row..row + p * 3].iter().map(|&v| S::lit(v as f64)));
                }
            }
        }
        let patches = Tensor::new(vec![gh * gw, p * p * 3], patches)?;
        let x = self.patch_embed.forward(tape, &patches)?;
        let x = tape.add(&x, &self.pos_embed)?;
        tape.concat_rows(&[&x, &self.registers])
    }

    /// Feed map tokens back into the backbone. With the type embedding
    /// disabled this is the identity.
    pub fn reenter_map_tokens(&self, tape: &Tape<S>, m: &MapTokens<S>) -> Result<FrameTokens<S>> {
        let (n, d) = m.tokens.dims2()?;
        ensure!(d == self.cfg.d_model, Dimension, "map tokens have width {}, model {}", d, self.cfg.d_model);
        ensure!(n == self.cfg.tokens_per_frame(), Dimension, "{} map tokens, expected {}", n, self.cfg.tokens_per_frame());
        if !self.cfg.token_type_embedding {
            return Ok(m.tokens.clone());
        }
        let x = self.reentry.forward(tape, &m.tokens)?;
        tape.add_row(&x, &self.type_embed)
    }

    /// Run all blocks over `frames` (one `[T × d]` tensor each). `mask`
    /// governs attention among these frames; every cached frame precedes
    /// them and is visible to all of them.
    pub fn backbone_forward(
        &self,
        tape: &Tape<S>,
        frames: &[FrameTokens<S>],
        mask: &AttentionMask,
        cache: Option<&KVCache<S>>,
    ) -> Result<BackboneOutput<S>> {
        let t = self.cfg.tokens_per_frame();
        let d = self.cfg.d_model;
        let n = frames.len();
        let layout = mask.layout();
        ensure!(n > 0, Contract, "backbone needs at least one frame");
        ensure!(
            layout.num_frames == n && layout.tokens_per_frame == t,
            Contract,
            "mask layout {:?} does not match {} frames of {} tokens",
            layout,
            n,
            t
        );
        for f in frames {
            ensure!(f.shape() == [t, d], Contract, "frame tokens of shape {:?}, expected [{}, {}]", f.shape(), t, d);
        }
        let cached = match cache {
            Some(c) => {
                ensure!(c.num_layers() == self.cfg.layers, Contract, "cache has {} layers, model {}", c.num_layers(), self.cfg.layers);
                ensure!(c.heads() == self.cfg.heads, Contract, "cache has {} heads, model {}", c.heads(), self.cfg.heads);
                if let Some(b) = c.layer(0)?.first() {
                    ensure!(b.k.shape() == [t, d], Contract, "cached block shape {:?}", b.k.shape());
                }
                c.num_frames()
            }
            None => 0,
        };
        let token_mask = {
            let own = mask.token_mask(0..n, 0..n);
            if cached == 0 {
                own
            } else {
                let (rows, own_cols, pre) = (n * t, n * t, cached * t);
                let mut m = Vec::with_capacity(rows * (pre + own_cols));
                for r in 0..rows {
                    m.extend(std::iter::repeat_n(true, pre));
                    m.extend_from_slice(&own[r * own_cols..(r + 1) * own_cols]);
                }
                m
            }
        };

        let refs: Vec<&Tensor<S>> = frames.iter().collect();
        let mut x = tape.concat_rows(&refs)?;
        let mut blocks: Vec<Vec<KvBlock<S>>> = vec![Vec::with_capacity(self.cfg.layers); n];
        for (l, block) in self.blocks.iter().enumerate() {
            // Intra-frame: all-to-all within each frame.
            let h = block.ln_intra.forward(tape, &x)?;
            let (q, k, v) = block.intra.project(tape, &h)?;
            let mut ctx = Vec::with_capacity(n);
            for f in 0..n {
                let (a, b) = (f * t, (f + 1) * t);
                ctx.push(scaled_dot_product(
                    tape,
                    &tape.slice_rows(&q, a, b)?,
                    &tape.slice_rows(&k, a, b)?,
                    &tape.slice_rows(&v, a, b)?,
                    self.cfg.heads,
                    None,
                )?);
            }
            let ctx = tape.concat_rows(&ctx.iter().collect::<Vec<_>>())?;
            x = tape.add(&x, &block.intra.out.forward(tape, &ctx)?)?;

            // Inter-frame: masked, over cached frames then these frames.
            let h = block.ln_inter.forward(tape, &x)?;
            let (q, k, v) = block.inter.project(tape, &h)?;
            for (f, frame_blocks) in blocks.iter_mut().enumerate() {
                let (a, b) = (f * t, (f + 1) * t);
                frame_blocks.push(KvBlock::new(tape.slice_rows(&k, a, b)?, tape.slice_rows(&v, a, b)?));
            }
            let (k_all, v_all) = match cache {
                Some(c) if cached > 0 => {
                    let layer = c.layer(l)?;
                    let mut ks: Vec<&Tensor<S>> = layer.iter().map(|b| &b.k).collect();
                    let mut vs: Vec<&Tensor<S>> = layer.iter().map(|b| &b.v).collect();
                    ks.push(&k);
                    vs.push(&v);
                    (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
                }
                _ => (k, v),
            };
            let ctx = scaled_dot_product(tape, &q, &k_all, &v_all, self.cfg.heads, Some(&token_mask))?;
            x = tape.add(&x, &block.inter.out.forward(tape, &ctx)?)?;

            let h = block.ln_mlp.forward(tape, &x)?;
            x = tape.add(&x, &block.mlp.forward(tape, &h)?)?;
        }
        let tokens = (0..n).map(|f| tape.slice_rows(&x, f * t, (f + 1) * t)).collect::<Result<Vec<_>>>()?;
        Ok(BackboneOutput { tokens, blocks })
    }

    fn normed(&self, tape: &Tape<S>, tokens: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = tokens.dims2()?;
        ensure!(
            n == self.cfg.tokens_per_frame() && d == self.cfg.d_model,
            Contract,
            "map tokens of shape {:?}, expected [{}, {}]",
            tokens.shape(),
            self.cfg.tokens_per_frame(),
            self.cfg.d_model
        );
        self.final_norm.forward(tape, tokens)
    }

    /// Register tokens pooled, then a small MLP to a unit quaternion and a
    /// translation.
    pub fn pose_head(&self, tape: &Tape<S>, m: &MapTokens<S>) -> Result<PosePrediction<S>> {
        let x = self.normed(tape, &m.tokens)?;
        self.pose_from_normed(tape, &x)
    }

    fn pose_from_normed(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<PosePrediction<S>> {
        let p = self.cfg.num_patches();
        let regs = tape.slice_rows(x, p, p + self.cfg.registers)?;
        let pooled = tape.mean_rows(&regs)?;
        let pooled = tape.reshape(&pooled, &[1, self.cfg.d_model])?;
        let raw = self.pose_head.forward(tape, &pooled)?;
        let quat = tape.normalize(&tape.reshape(&tape.slice_cols(&raw, 0, 4)?, &[4])?)?;
        let trans = tape.reshape(&tape.slice_cols(&raw, 4, 7)?, &[3])?;
        Ok(PosePrediction { quat, trans })
    }

    /// Per-patch MLP, unfolded to `[H·W × 4]`; returns `(P*, Σ*)`.
    pub fn pointmap_head(&self, tape: &Tape<S>, m: &MapTokens<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let x = self.normed(tape, &m.tokens)?;
        self.pointmap_from_normed(tape, &x)
    }

    fn pointmap_from_normed(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let patches = tape.slice_rows(x, 0, self.cfg.num_patches())?;
        let raw = self.point_head.forward(tape, &patches)?;
        let grid = tape.gather(&raw, Arc::clone(&self.unfold), &[self.cfg.num_pixels(), 4])?;
        let points = tape.slice_cols(&grid, 0, 3)?;
        let c = tape.reshape(&tape.slice_cols(&grid, 3, 4)?, &[self.cfg.num_pixels()])?;
        let c = tape.clamp(&c, S::lit(CONF_RAW_RANGE.0), S::lit(CONF_RAW_RANGE.1))?;
        let confidence = tape.add_scalar(&tape.exp(&c)?, S::one())?;
        Ok((points, confidence))
    }

    /// Both heads on one frame's map tokens.
    pub fn predict(&self, tape: &Tape<S>, m: &MapTokens<S>) -> Result<FramePrediction<S>> {
        let x = self.normed(tape, &m.tokens)?;
        let pose = self.pose_from_normed(tape, &x)?;
        let (pointmap, confidence) = self.pointmap_from_normed(tape, &x)?;
        let depth = tape.reshape(&tape.slice_cols(&pointmap, 2, 3)?, &[self.cfg.num_pixels()])?;
        Ok(FramePrediction { pointmap, confidence, depth, pose })
    }
}

impl<S: Real> Params<S> for SlamFormer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        f(join(prefix, "registers"), &self.registers);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.reentry.visit(&join(prefix, "reentry"), f);
        f(join(prefix, "type_embed"), &self.type_embed);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.pose_head.visit(&join(prefix, "pose_head"), f);
        self.point_head.visit(&join(prefix, "point_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        f(join(prefix, "registers"), &mut self.registers);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.reentry.visit_mut(&join(prefix, "reentry"), f);
        f(join(prefix, "type_embed"), &mut self.type_embed);
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.pose_head.visit_mut(&join(prefix, "pose_head"), f);
        self.point_head.visit_mut(&join(prefix, "point_head"), f);
    }
}

/// `unfold[pixel·4 + c]` = index into the flattened per-patch head output
/// `[patches × patch²·4]`.
pub fn unfold_indices(cfg: &ModelConfig) -> Vec<usize> {
    let (h, w) = cfg.image_hw;
    let p = cfg.patch;
    let gw = w / p;
    let per_patch = p * p * 4;
    let mut idx = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let patch = (y / p) * gw + x / p;
            let within = ((y % p) * p + x % p) * 4;
            for c in 0..4 {
                idx.push(patch * per_patch + within + c);
            }
        }
    }
    idx
}

/// Inverse permutation of [`unfold_indices`].
pub fn fold_indices(cfg: &ModelConfig) -> Vec<usize> {
    let unfold = unfold_indices(cfg);
    let mut fold = vec![0; unfold.len()];
    for (dst, &src) in unfold.iter().enumerate() {
        fold[src] = dst;
    }
    fold
}
