//! Binary model checkpoints.
//!
//! ```text
//! magic     8 bytes "HARCKPT\0"
//! version   u32     1
//! kind      u32     1 = mlp, 2 = encoder, 3 = fc-bnn
//! n_layers  u32
//! n_layers × { in u32, out u32, activation u8, bayesian u8 }
//! n_meta    u32
//! n_meta × { key_len u16, key utf-8, value f64 }
//! n_blocks  u32
//! n_blocks × { len u64, len × f64 }
//! ```
//!
//! Everything is little-endian. Parameters are stored as `f64`, so saving and
//! loading is bit-exact for both `f32` and `f64` models.

use std::io::{Read, Write};

use crate::error::{format_err, Result};
use crate::nncore::Activation;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"HARCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Encoder,
    FcBnn,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::Mlp => 1,
            ModelKind::Encoder => 2,
            ModelKind::FcBnn => 3,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(ModelKind::Mlp),
            2 => Some(ModelKind::Encoder),
            3 => Some(ModelKind::FcBnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub bayesian: bool,
}

/// Decoded checkpoint, independent of scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub kind: ModelKind,
    pub layers: Vec<LayerShape>,
    pub meta: Vec<(String, f64)>,
    pub blocks: Vec<Vec<f64>>,
}

impl CheckpointData {
    pub fn meta(&self, key: &str) -> Option<f64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn require_meta(&self, key: &str) -> Result<f64> {
        self.meta(key).ok_or_else(|| format_err("checkpoint", format!("missing meta key {key}")))
    }

    pub fn blocks_as<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.blocks.iter().map(|b| b.iter().map(|&v| T::lit(v)).collect()).collect()
    }
}

pub fn save_checkpoint(out: &mut impl Write, data: &CheckpointData) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&data.kind.code().to_le_bytes())?;
    out.write_all(&(data.layers.len() as u32).to_le_bytes())?;
    for l in &data.layers {
        out.write_all(&(l.in_dim as u32).to_le_bytes())?;
        out.write_all(&(l.out_dim as u32).to_le_bytes())?;
        out.write_all(&[l.activation.code(), u8::from(l.bayesian)])?;
    }
    out.write_all(&(data.meta.len() as u32).to_le_bytes())?;
    for (k, v) in &data.meta {
        out.write_all(&(k.len() as u16).to_le_bytes())?;
        out.write_all(k.as_bytes())?;
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(data.blocks.len() as u32).to_le_bytes())?;
    for b in &data.blocks {
        out.write_all(&(b.len() as u64).to_le_bytes())?;
        for v in b {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| format_err("checkpoint", e.to_string()))?;
    Ok(buf)
}

pub fn load_checkpoint(r: &mut impl Read) -> Result<CheckpointData> {
    if &take::<8>(r)? != MAGIC {
        return Err(format_err("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(format_err("checkpoint", format!("unsupported version {version}")));
    }
    let code = u32::from_le_bytes(take(r)?);
    let kind = ModelKind::from_code(code).ok_or_else(|| format_err("checkpoint", format!("model kind {code}")))?;
    let n_layers = u32::from_le_bytes(take(r)?) as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = u32::from_le_bytes(take(r)?) as usize;
        let out_dim = u32::from_le_bytes(take(r)?) as usize;
        let [act, bayes] = take::<2>(r)?;
        let activation =
            Activation::from_code(act).ok_or_else(|| format_err("checkpoint", format!("activation {act}")))?;
        layers.push(LayerShape { in_dim, out_dim, activation, bayesian: bayes != 0 });
    }
    let n_meta = u32::from_le_bytes(take(r)?) as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut key = vec![0u8; len];
        r.read_exact(&mut key).map_err(|e| format_err("checkpoint", e.to_string()))?;
        let key = String::from_utf8(key).map_err(|e| format_err("checkpoint", e.to_string()))?;
        meta.push((key, f64::from_le_bytes(take(r)?)));
    }
    let n_blocks = u32::from_le_bytes(take(r)?) as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let len = u64::from_le_bytes(take(r)?) as usize;
        let block = (0..len).map(|_| take::<8>(r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        blocks.push(block);
    }
    Ok(CheckpointData { kind, layers, meta, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let data = CheckpointData {
            kind: ModelKind::FcBnn,
            layers: vec![LayerShape { in_dim: 3, out_dim: 2, activation: Activation::Relu, bayesian: true }],
            meta: vec![("prior_sigma".into(), 1.0), ("odd".into(), f64::MIN_POSITIVE)],
            blocks: vec![vec![0.1, -0.0, 1e-300, f64::MAX], vec![]],
        };
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &data).unwrap();
        let back = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(
            back.blocks[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.blocks[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_garbage() {
        assert!(load_checkpoint(&mut &b"NOTACKPT...."[..]).is_err());
        let mut buf = Vec::new();
        save_checkpoint(
            &mut buf,
            &CheckpointData { kind: ModelKind::Mlp, layers: vec![], meta: vec![], blocks: vec![vec![1.0]] },
        )
        .unwrap();
        buf.truncate(buf.len() - 3);
        assert!(load_checkpoint(&mut buf.as_slice()).is_err());
    }
}
