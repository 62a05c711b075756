//! Masked multi-head attention over frame-blocked token sequences and the
//! KV cache that makes frame-by-frame inference match a batch pass.

mod kv_cache;
mod mask;

use rand::Rng;

pub use kv_cache::{KVCache, KvBlock, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use mask::{AttentionMask, FrameLayout, MaskKind};

use crate::error::{ensure, Error, Result};
use crate::nn::{join, Linear, Params};
use crate::tensor::{Real, Tape, Tensor};

/// Q/K/V/output projections of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights<S: Real = f32> {
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub out: Linear<S>,
}

impl<S: Real> AttentionWeights<S> {
    pub fn random<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::random(d_model, d_model, rng),
            k: Linear::random(d_model, d_model, rng),
            v: Linear::random(d_model, d_model, rng),
            out: Linear::random(d_model, d_model, rng),
        }
    }

    pub fn project(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        Ok((self.q.forward(tape, x)?, self.k.forward(tape, x)?, self.v.forward(tape, x)?))
    }
}

impl<S: Real> Params<S> for AttentionWeights<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Per-head scaled dot-product attention on already projected tensors.
/// `q: [nq × d]`, `k, v: [nk × d]`, `mask: [nq × nk]` (true = may attend).
/// Returns the head-concatenated context `[nq × d]`.
pub fn scaled_dot_product<S: Real>(
    tape: &Tape<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor<S>> {
    let (_, d) = q.dims2()?;
    ensure!(heads > 0 && d % heads == 0, Config, "d_model {} not divisible by {} heads", d, heads);
    ensure!(k.dims2()? == v.dims2()? && k.dims2()?.1 == d, Dimension, "q/k/v widths disagree");
    let dh = d / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, cols.0, cols.1)?;
        let kh = tape.slice_cols(k, cols.0, cols.1)?;
        let vh = tape.slice_cols(v, cols.0, cols.1)?;
        let scores = tape.matmul(&qh, &tape.transpose(&kh)?)?;
        let scores = tape.scale(&scores, scale)?;
        let weights = tape.softmax_rows(&scores, mask)?;
        contexts.push(tape.matmul(&weights, &vh)?);
    }
    let refs: Vec<&Tensor<S>> = contexts.iter().collect();
    tape.concat_cols(&refs)
}

/// Self-attention over a frame-blocked sequence `x: [frames·tokens × d]`
/// under a frame mask: project, attend per head, concatenate, project out.
pub fn multihead_attention<S: Real>(
    tape: &Tape<S>,
    weights: &AttentionWeights<S>,
    x: &Tensor<S>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor<S>> {
    let layout = mask.layout();
    let (n, d) = x.dims2()?;
    ensure!(heads > 0 && d % heads == 0, Config, "d_model {} not divisible by {} heads", d, heads);
    ensure!(n == layout.num_tokens(), Contract, "{} tokens for layout {:?}", n, layout);
    let (q, k, v) = weights.project(tape, x)?;
    let frames = layout.num_frames;
    let token_mask = mask.token_mask(0..frames, 0..frames);
    let ctx = scaled_dot_product(tape, &q, &k, &v, heads, Some(&token_mask))?;
    weights.out.forward(tape, &ctx)
}

/// Attention of one new frame's queries over every cached frame of `layer`
/// followed by the frame itself. Returns the head-concatenated context.
pub fn incremental_attention<S: Real>(
    tape: &Tape<S>,
    q_new: &Tensor<S>,
    cache: &KVCache<S>,
    layer: usize,
    self_kv: Option<(&Tensor<S>, &Tensor<S>)>,
    heads: usize,
) -> Result<Tensor<S>> {
    let blocks = cache.layer(layer)?;
    if blocks.is_empty() && self_kv.is_none() {
        return Err(Error::Contract("incremental attention with empty cache and no self K/V".into()));
    }
    let mut ks: Vec<&Tensor<S>> = blocks.iter().map(|b| &b.k).collect();
    let mut vs: Vec<&Tensor<S>> = blocks.iter().map(|b| &b.v).collect();
    if let Some((k, v)) = self_kv {
        ks.push(k);
        vs.push(v);
    }
    let k = tape.concat_rows(&ks)?;
    let v = tape.concat_rows(&vs)?;
    scaled_dot_product(tape, q_new, &k, &v, heads, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_single_head_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = AttentionWeights::<f64>::random(4, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let out = multihead_attention(&tape, &w, &x, 1, &AttentionMask::full(FrameLayout::new(1, 1))).unwrap();
        let v = w.v.forward(&tape, &x).unwrap();
        let expect = w.out.forward(&tape, &v).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AttentionWeights::<f32>::random(8, &mut rng);
        let row = Tensor::<f32>::randn(&[1, 8], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let x = tape.concat_rows(&[&row, &row]).unwrap();
        let out = multihead_attention(&tape, &w, &x, 2, &AttentionMask::full(FrameLayout::new(1, 2))).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AttentionWeights::<f32>::random(6, &mut rng);
        let x = Tensor::<f32>::randn(&[2, 6], 1.0, &mut rng);
        let err = multihead_attention(&Tape::no_grad(), &w, &x, 4, &AttentionMask::full(FrameLayout::new(2, 1)));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    /// Explicit per-position loop, one head at a time.
    fn loop_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, mask: &[bool]) -> Vec<f64> {
        let (nq, d) = q.dims2().unwrap();
        let nk = k.dims2().unwrap().0;
        let dh = d / heads;
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = vec![f64::NEG_INFINITY; nk];
                for j in 0..nk {
                    if mask[i * nk + j] {
                        let dot: f64 = (0..dh).map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c]).sum();
                        scores[j] = dot / (dh as f64).sqrt();
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[i * d + h * dh + c] = (0..nk).map(|j| e[j] / z * v.row(j)[h * dh + c]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn three_frame_attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = FrameLayout::new(3, 3);
        let w = AttentionWeights::<f64>::random(8, &mut rng);
        let x = Tensor::<f64>::randn(&[9, 8], 1.0, &mut rng);
        let mask = AttentionMask::causal_full2(layout);
        let tape = Tape::no_grad();
        let out = multihead_attention(&tape, &w, &x, 2, &mask).unwrap();
        let (q, k, v) = w.project(&tape, &x).unwrap();
        let ctx = loop_oracle(&q, &k, &v, 2, &mask.token_mask(0..3, 0..3));
        let expect = w.out.forward(&tape, &Tensor::new(vec![9, 8], ctx).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-5);
    }

    fn projected_frames(n: usize, seed: u64) -> (Vec<(Tensor<f32>, Tensor<f32>, Tensor<f32>)>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|_| {
                (
                    Tensor::randn(&[3, 8], 1.0, &mut rng),
                    Tensor::randn(&[3, 8], 1.0, &mut rng),
                    Tensor::randn(&[3, 8], 1.0, &mut rng),
                )
            })
            .collect();
        (frames, 2)
    }

    fn batch_row(frames: &[(Tensor<f32>, Tensor<f32>, Tensor<f32>)], heads: usize) -> Tensor<f32> {
        let tape = Tape::no_grad();
        let n = frames.len();
        let cat = |sel: fn(&(Tensor<f32>, Tensor<f32>, Tensor<f32>)) -> &Tensor<f32>| {
            tape.concat_rows(&frames.iter().map(sel).collect::<Vec<_>>()).unwrap()
        };
        let (q, k, v) = (cat(|f| &f.0), cat(|f| &f.1), cat(|f| &f.2));
        let mask = AttentionMask::causal_full2(FrameLayout::new(3, n));
        let full = scaled_dot_product(&tape, &q, &k, &v, heads, Some(&mask.token_mask(0..n, 0..n))).unwrap();
        tape.slice_rows(&full, 3 * (n - 1), 3 * n).unwrap()
    }

    #[test]
    fn incremental_matches_batch_recompute() {
        for cached in [1usize, 5] {
            let (frames, heads) = projected_frames(cached + 1, 10 + cached as u64);
            let mut cache = KVCache::new(1, heads);
            for (i, f) in frames[..cached].iter().enumerate() {
                cache.append(i, vec![KvBlock::new(f.1.clone(), f.2.clone())]).unwrap();
            }
            let last = &frames[cached];
            let tape = Tape::no_grad();
            let inc = incremental_attention(&tape, &last.0, &cache, 0, Some((&last.1, &last.2)), heads).unwrap();
            assert!(inc.max_abs_diff(&batch_row(&frames, heads)) < 1e-5);
        }
    }

    #[test]
    fn incremental_self_only_equals_self_attention() {
        let (frames, heads) = projected_frames(1, 20);
        let f = &frames[0];
        let tape = Tape::no_grad();
        let inc = incremental_attention(&tape, &f.0, &KVCache::new(1, heads), 0, Some((&f.1, &f.2)), heads).unwrap();
        let direct = scaled_dot_product(&tape, &f.0, &f.1, &f.2, heads, None).unwrap();
        assert!(inc.bitwise_eq(&direct));
        let err = incremental_attention(&tape, &f.0, &KVCache::new(1, heads), 0, None, heads);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
