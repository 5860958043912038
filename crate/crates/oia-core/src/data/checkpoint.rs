//! Model checkpoints.
//!
//! Layout: magic "OIAC" | u32 version | ten u32 config fields | lambda as
//! binary64 bits | u32 tensor count | per tensor (u32 rank, u32 dims,
//! binary64 little-endian values). Parameters are stored at full precision
//! so a reloaded model reproduces its evaluation metrics exactly.

use crate::error::{OiaError, Result};
use crate::model::{ModelConfig, ModelParams, NUM_PARAM_TENSORS};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OIAC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    for field in [
        cfg.c_backbone,
        cfg.c_local,
        cfg.c_global,
        cfg.global_mid,
        cfg.spatial,
        cfg.k,
        cfg.selector_mid.0,
        cfg.selector_mid.1,
        cfg.head_dims.0,
        cfg.head_dims.1,
    ] {
        push_u32(&mut buf, field as u32);
    }
    buf.extend_from_slice(&cfg.lambda.to_bits().to_le_bytes());
    let tensors = params.tensors();
    push_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        push_u32(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in t.values() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.off + 4;
        if end > self.bytes.len() {
            return Err(OiaError::Format(format!(
                "checkpoint truncated reading {what}"
            )));
        }
        let v = u32::from_le_bytes(self.bytes[self.off..end].try_into().unwrap());
        self.off = end;
        Ok(v)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let end = self.off + 8;
        if end > self.bytes.len() {
            return Err(OiaError::Format(format!(
                "checkpoint truncated reading {what}"
            )));
        }
        let v = f64::from_bits(u64::from_le_bytes(
            self.bytes[self.off..end].try_into().unwrap(),
        ));
        self.off = end;
        Ok(v)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(OiaError::Format(format!(
            "bad magic in checkpoint {}",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: &bytes,
        off: 4,
    };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(OiaError::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let field = |what: &str, r: &mut Reader| -> Result<usize> { Ok(r.u32(what)? as usize) };
    let c_backbone = field("c_backbone", &mut r)?;
    let c_local = field("c_local", &mut r)?;
    let c_global = field("c_global", &mut r)?;
    let global_mid = field("global_mid", &mut r)?;
    let spatial = field("spatial", &mut r)?;
    let k = field("k", &mut r)?;
    let sel0 = field("selector_mid.0", &mut r)?;
    let sel1 = field("selector_mid.1", &mut r)?;
    let head0 = field("head_dims.0", &mut r)?;
    let head1 = field("head_dims.1", &mut r)?;
    let lambda = r.f64("lambda")?;
    let config = ModelConfig {
        c_backbone,
        c_local,
        c_global,
        global_mid,
        spatial,
        k,
        selector_mid: (sel0, sel1),
        head_dims: (head0, head1),
        lambda,
    };
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    if count != NUM_PARAM_TENSORS {
        return Err(OiaError::Format(format!(
            "checkpoint holds {count} tensors, expected {NUM_PARAM_TENSORS}"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(OiaError::Format(format!(
                "tensor {i} has unsupported rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = r.f64("tensor value")?;
            if !v.is_finite() {
                return Err(OiaError::Format(format!(
                    "non-finite parameter in tensor {i}"
                )));
            }
            vals.push(v);
        }
        tensors.push(Tensor::new(shape, vals)?);
    }
    if r.off != bytes.len() {
        return Err(OiaError::Format(format!(
            "{} unread bytes at end of checkpoint",
            bytes.len() - r.off
        )));
    }
    ModelParams::from_tensors(&config, tensors)
}
