use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SFKV";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Post-projection keys and values of one frame at one layer, each
/// `[tokens_per_frame × d_model]` with head-major columns.
#[derive(Debug, Clone)]
pub struct KvBlock<S: Real = f32> {
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Real> KvBlock<S> {
    pub fn new(k: Tensor<S>, v: Tensor<S>) -> Self {
        Self { k, v }
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        self.k.bitwise_eq(&other.k) && self.v.bitwise_eq(&other.v)
    }
}

/// Per-layer, per-keyframe K/V blocks captured at the input of each
/// inter-frame attention.
#[derive(Debug, Clone)]
pub struct KVCache<S: Real = f32> {
    heads: usize,
    layers: Vec<Vec<KvBlock<S>>>,
    frame_ids: Vec<usize>,
}

impl<S: Real> KVCache<S> {
    pub fn new(num_layers: usize, heads: usize) -> Self {
        Self { heads, layers: vec![Vec::new(); num_layers], frame_ids: Vec::new() }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_frames(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn frame_ids(&self) -> &[usize] {
        &self.frame_ids
    }

    pub fn layer(&self, layer: usize) -> Result<&[KvBlock<S>]> {
        self.layers
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Bounds(format!("layer {layer} of {}", self.layers.len())))
    }

    /// Extend every layer with one more frame. `blocks` holds one block per
    /// layer.
    pub fn append(&mut self, frame_id: usize, blocks: Vec<KvBlock<S>>) -> Result<()> {
        if let Some(&last) = self.frame_ids.last() {
            ensure!(frame_id > last, Ordering, "frame id {} after {}", frame_id, last);
        }
        ensure!(
            blocks.len() == self.layers.len(),
            Dimension,
            "{} blocks for {} layers",
            blocks.len(),
            self.layers.len()
        );
        if let Some(reference) = self.layers.first().and_then(|l| l.first()) {
            for b in &blocks {
                ensure!(
                    b.k.shape() == reference.k.shape() && b.v.shape() == reference.v.shape(),
                    Dimension,
                    "block shape {:?} differs from cached {:?}",
                    b.k.shape(),
                    reference.k.shape()
                );
            }
        }
        for (layer, block) in self.layers.iter_mut().zip(blocks) {
            layer.push(KvBlock::new(block.k.detached(), block.v.detached()));
        }
        self.frame_ids.push(frame_id);
        Ok(())
    }

    /// Overwrite the first `prefix.num_frames()` frames in every layer with
    /// the blocks of `prefix`. Everything is validated before anything is
    /// written, so the swap is all-or-nothing.
    pub fn replace_prefix(&mut self, prefix: &KVCache<S>) -> Result<()> {
        let n = prefix.num_frames();
        ensure!(n <= self.num_frames(), Bounds, "prefix of {} frames exceeds cache of {}", n, self.num_frames());
        ensure!(
            prefix.num_layers() == self.num_layers(),
            Dimension,
            "prefix has {} layers, cache {}",
            prefix.num_layers(),
            self.num_layers()
        );
        ensure!(
            prefix.frame_ids() == &self.frame_ids[..n],
            Contract,
            "replacement frames {:?} are not the cache prefix {:?}",
            prefix.frame_ids(),
            &self.frame_ids[..n]
        );
        for (mine, theirs) in self.layers.iter().zip(&prefix.layers) {
            for (a, b) in mine.iter().zip(theirs) {
                ensure!(
                    a.k.shape() == b.k.shape() && a.v.shape() == b.v.shape(),
                    Dimension,
                    "replacement block shape {:?} vs {:?}",
                    b.k.shape(),
                    a.k.shape()
                );
            }
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&prefix.layers) {
            for (slot, block) in mine.iter_mut().zip(theirs) {
                *slot = block.clone();
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.frame_ids == other.frame_ids
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y)))
    }

    fn tokens_and_width(&self) -> (usize, usize) {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map(|b| (b.k.shape()[0], b.k.shape()[1]))
            .unwrap_or((0, 0))
    }

    /// Little-endian snapshot: `SFKV`, version, L, frames, tokens_per_frame,
    /// heads, d_head (all u32), then f32 K and V blocks layer-major,
    /// frame-minor, then the frame ids as u64.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let (tokens, width) = self.tokens_and_width();
        ensure!(self.heads > 0 && width % self.heads == 0, Contract, "width {} not divisible by {} heads", width, self.heads);
        w.write_all(SNAPSHOT_MAGIC)?;
        for v in [
            SNAPSHOT_VERSION,
            self.num_layers() as u32,
            self.num_frames() as u32,
            tokens as u32,
            self.heads as u32,
            (width / self.heads) as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for layer in &self.layers {
            for block in layer {
                for t in [&block.k, &block.v] {
                    for &x in t.data() {
                        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
                    }
                }
            }
        }
        for &id in &self.frame_ids {
            w.write_all(&(id as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a KV cache snapshot".into()));
        }
        let mut header = [0u32; 6];
        for h in header.iter_mut() {
            *h = read_u32(&mut r)?;
        }
        let [version, layers, frames, tokens, heads, d_head] = header.map(|v| v as usize);
        ensure!(version == SNAPSHOT_VERSION as usize, Format, "unsupported snapshot version {}", version);
        let width = heads * d_head;
        let mut cache = KVCache::new(layers, heads);
        for layer in cache.layers.iter_mut() {
            for _ in 0..frames {
                let k = read_block(&mut r, tokens, width)?;
                let v = read_block(&mut r, tokens, width)?;
                layer.push(KvBlock::new(k, v));
            }
        }
        for _ in 0..frames {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            cache.frame_ids.push(u64::from_le_bytes(buf) as usize);
        }
        ensure!(cache.frame_ids.windows(2).all(|w| w[0] < w[1]), Format, "snapshot frame ids not increasing");
        Ok(cache)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_block<S: Real, R: Read>(r: &mut R, tokens: usize, width: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(tokens * width);
    let mut buf = [0u8; 4];
    for _ in 0..tokens * width {
        r.read_exact(&mut buf)?;
        data.push(S::lit(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(vec![tokens, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blocks(layers: usize, seed: u64) -> Vec<KvBlock<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layers)
            .map(|_| KvBlock::new(Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[3, 4], 1.0, &mut rng)))
            .collect()
    }

    fn cache_of(ids: &[usize], seed: u64) -> KVCache<f32> {
        let mut c = KVCache::new(2, 2);
        for (i, &id) in ids.iter().enumerate() {
            c.append(id, blocks(2, seed + i as u64)).unwrap();
        }
        c
    }

    #[test]
    fn append_to_empty_and_twice() {
        let mut c = KVCache::<f32>::new(2, 2);
        c.append(3, blocks(2, 1)).unwrap();
        assert_eq!(c.num_frames(), 1);
        c.append(7, blocks(2, 2)).unwrap();
        assert_eq!(c.frame_ids(), &[3, 7]);
        assert!(matches!(c.append(7, blocks(2, 3)), Err(Error::Ordering(_))));
        assert!(matches!(c.append(9, blocks(1, 3)), Err(Error::Dimension(_))));
    }

    /// Replays a log of cache operations against a plain list model.
    #[test]
    fn append_after_replace_matches_replay() {
        let mut c = cache_of(&[0, 1, 2], 10);
        let mut reference: Vec<usize> = vec![0, 1, 2];
        c.replace_prefix(&cache_of(&[0, 1], 50)).unwrap();
        c.append(5, blocks(2, 99)).unwrap();
        reference.push(5);
        assert_eq!(c.frame_ids(), reference.as_slice());
        for l in 0..c.num_layers() {
            assert_eq!(c.layer(l).unwrap().len(), reference.len());
        }
    }

    #[test]
    fn replace_zero_is_identity() {
        let mut c = cache_of(&[0, 1, 2], 10);
        let before = c.clone();
        c.replace_prefix(&KVCache::new(2, 2)).unwrap();
        assert!(c.bitwise_eq(&before));
    }

    #[test]
    fn replace_full_equals_backend() {
        let mut c = cache_of(&[0, 1, 2], 10);
        let backend = cache_of(&[0, 1, 2], 70);
        c.replace_prefix(&backend).unwrap();
        assert!(c.bitwise_eq(&backend));
    }

    #[test]
    fn replace_partial_keeps_suffix_bitwise() {
        let mut c = cache_of(&[0, 1, 2, 3, 4], 10);
        let before = c.clone();
        c.replace_prefix(&cache_of(&[0, 1], 70)).unwrap();
        for l in 0..2 {
            for f in 0..5 {
                let same = c.layer(l).unwrap()[f].bitwise_eq(&before.layer(l).unwrap()[f]);
                assert_eq!(same, f >= 2, "layer {l} frame {f}");
            }
        }
    }

    #[test]
    fn replace_errors() {
        let mut c = cache_of(&[0, 1], 10);
        assert!(matches!(c.replace_prefix(&cache_of(&[0, 1, 2], 3)), Err(Error::Bounds(_))));
        assert!(matches!(c.replace_prefix(&cache_of(&[1], 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let c = cache_of(&[2, 4, 9], 5);
        let mut buf = Vec::new();
        c.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SFKV");
        assert_eq!(buf.len(), 4 + 6 * 4 + 2 * 3 * 2 * 12 * 4 + 3 * 8);
        let back = KVCache::<f32>::read_snapshot(buf.as_slice()).unwrap();
        assert!(back.bitwise_eq(&c));
        assert_eq!(back.heads(), 2);
        assert!(matches!(KVCache::<f32>::read_snapshot(&b"NOPE"[..]), Err(Error::Format(_))));
    }
}
