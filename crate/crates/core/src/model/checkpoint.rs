//! `SFWT` weight checkpoints.
//!
//! Layout (little-endian): magic, version u32, the seven config fields
//! (u32, flag as u32 0/1), parameter count u32, then per parameter: name
//! length u32, UTF-8 name, rank u32, dims u32, f32 data.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, SlamFormer};
use crate::error::{ensure, Error, Result};
use crate::nn::Params;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFWT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

impl<S: Real> SlamFormer<S> {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let c = self.config();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [c.layers, c.d_model, c.heads, c.patch, c.registers, c.image_hw.0, c.image_hw.1] {
            put_u32(&mut w, v)?;
        }
        put_u32(&mut w, c.token_type_embedding as usize)?;
        let mut params = Vec::new();
        self.visit("", &mut |name, t| params.push((name, t.clone())));
        put_u32(&mut w, params.len())?;
        for (name, t) in params {
            put_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut w, d)?;
            }
            for &x in t.data() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == CHECKPOINT_MAGIC, Format, "not a weight checkpoint");
        let version = get_u32(&mut r)?;
        ensure!(version == CHECKPOINT_VERSION as usize, Format, "unsupported checkpoint version {}", version);
        let mut f = [0usize; 8];
        for v in f.iter_mut() {
            *v = get_u32(&mut r)?;
        }
        ensure!(f[7] <= 1, Format, "bad type-embedding flag {}", f[7]);
        let cfg = ModelConfig {
            layers: f[0],
            d_model: f[1],
            heads: f[2],
            patch: f[3],
            registers: f[4],
            image_hw: (f[5], f[6]),
            token_type_embedding: f[7] == 1,
        };
        cfg.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = get_u32(&mut r)?;
        let mut stored: HashMap<String, Tensor<S>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = get_u32(&mut r)?;
            ensure!(len <= 4096, Format, "parameter name of {} bytes", len);
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)?;
            ensure!(rank <= 4, Format, "parameter {} has rank {}", name, rank);
            let shape = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            ensure!(n <= 1 << 28, Format, "parameter {} too large", name);
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data =
                bytes.chunks_exact(4).map(|b| S::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            stored.insert(name, Tensor::new(shape, data)?);
        }
        let mut model = SlamFormer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut problem = None;
        model.visit_mut("", &mut |name, t| match stored.remove(&name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                problem.get_or_insert(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing parameter {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Format(p));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Format(format!("unknown parameter {extra}")));
        }
        Ok(model)
    }
}
