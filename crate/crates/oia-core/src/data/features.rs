//! Per-scene binary feature files.
//!
//! Layout (all integers unsigned 32-bit little-endian):
//!   magic "OIAF" | version | N | c_local | c_backbone | H_b | W_b
//! followed by the backbone values and then the N proposal blocks, each as
//! IEEE-754 binary32 little-endian, row-major. The proposal side length is
//! not stored; it is recovered from the residual payload size, which must
//! factor as N * c_local * s * s for an exact integer s.

use crate::error::{OiaError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const FEATURE_MAGIC: [u8; 4] = *b"OIAF";
pub const FEATURE_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_values(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialize one scene's features. Values are stored as binary32; callers
/// that need bit-exact round trips must hold values representable in that
/// precision (the synthetic generator quantizes accordingly).
pub fn write_features(path: &Path, backbone: &Tensor, proposals: &[Tensor]) -> Result<()> {
    if backbone.rank() != 3 {
        return Err(OiaError::shape(
            "write_features",
            format!("backbone rank {} != 3", backbone.rank()),
        ));
    }
    let n = proposals.len();
    let c_local = if n > 0 { proposals[0].shape()[0] } else { 0 };
    for (i, p) in proposals.iter().enumerate() {
        if p.rank() != 3 || p.shape()[1] != p.shape()[2] {
            return Err(OiaError::shape(
                "write_features",
                format!("proposal {i} must be square rank 3, got {:?}", p.shape()),
            ));
        }
        if p.shape() != proposals[0].shape() {
            return Err(OiaError::shape(
                "write_features",
                format!(
                    "proposal {i} shape {:?} differs from first {:?}",
                    p.shape(),
                    proposals[0].shape()
                ),
            ));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&FEATURE_MAGIC);
    push_u32(&mut buf, FEATURE_VERSION);
    push_u32(&mut buf, n as u32);
    push_u32(&mut buf, c_local as u32);
    push_u32(&mut buf, backbone.shape()[0] as u32);
    push_u32(&mut buf, backbone.shape()[1] as u32);
    push_u32(&mut buf, backbone.shape()[2] as u32);
    push_values(&mut buf, backbone);
    for p in proposals {
        push_values(&mut buf, p);
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_u32(bytes: &[u8], off: &mut usize, what: &str) -> Result<u32> {
    let end = *off + 4;
    if end > bytes.len() {
        return Err(OiaError::Format(format!(
            "feature file truncated reading {what}"
        )));
    }
    let v = u32::from_le_bytes(bytes[*off..end].try_into().unwrap());
    *off = end;
    Ok(v)
}

fn read_f32_block(bytes: &[u8], off: &mut usize, count: usize, what: &str) -> Result<Vec<f64>> {
    let end = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(*off))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| OiaError::Format(format!("feature file truncated reading {what}")))?;
    let mut out = Vec::with_capacity(count);
    for chunk in bytes[*off..end].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(OiaError::Format(format!("non-finite value in {what}")));
        }
        out.push(v as f64);
    }
    *off = end;
    Ok(out)
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    for cand in r.saturating_sub(1)..=r + 1 {
        if cand * cand == n {
            return Some(cand);
        }
    }
    None
}

/// Read back a feature file written by [`write_features`].
pub fn load_features(path: &Path) -> Result<(Tensor, Vec<Tensor>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
        return Err(OiaError::Format(format!(
            "bad magic in feature file {}",
            path.display()
        )));
    }
    let mut off = 4;
    let version = read_u32(&bytes, &mut off, "version")?;
    if version != FEATURE_VERSION {
        return Err(OiaError::Format(format!(
            "unsupported feature file version {version}, expected {FEATURE_VERSION}"
        )));
    }
    let n = read_u32(&bytes, &mut off, "proposal count")? as usize;
    let c_local = read_u32(&bytes, &mut off, "proposal channels")? as usize;
    let c_backbone = read_u32(&bytes, &mut off, "backbone channels")? as usize;
    let h_b = read_u32(&bytes, &mut off, "backbone height")? as usize;
    let w_b = read_u32(&bytes, &mut off, "backbone width")? as usize;
    if c_backbone == 0 || h_b == 0 || w_b == 0 {
        return Err(OiaError::Format(format!(
            "degenerate backbone dimensions {c_backbone}x{h_b}x{w_b}"
        )));
    }
    if n > 0 && c_local == 0 {
        return Err(OiaError::Format(
            "proposal channel count 0 with nonzero proposal count".into(),
        ));
    }

    let backbone_len = c_backbone
        .checked_mul(h_b)
        .and_then(|v| v.checked_mul(w_b))
        .ok_or_else(|| {
            OiaError::Format(format!(
                "backbone dimensions {c_backbone}x{h_b}x{w_b} overflow"
            ))
        })?;
    let backbone_vals = read_f32_block(&bytes, &mut off, backbone_len, "backbone")?;
    let backbone = Tensor::new(vec![c_backbone, h_b, w_b], backbone_vals)?;

    let remaining = bytes.len() - off;
    if remaining % 4 != 0 {
        return Err(OiaError::Format(format!(
            "proposal payload of {remaining} bytes is not a whole number of values"
        )));
    }
    let total_vals = remaining / 4;
    let mut proposals = Vec::new();
    if n == 0 {
        if total_vals != 0 {
            return Err(OiaError::Format(format!(
                "{total_vals} trailing values in a file declaring 0 proposals"
            )));
        }
    } else {
        let per_block = total_vals / n;
        if per_block * n != total_vals || per_block % c_local != 0 {
            return Err(OiaError::Format(format!(
                "payload of {total_vals} values does not divide into {n} blocks of {c_local} channels"
            )));
        }
        let spatial_sq = per_block / c_local;
        let Some(s) = exact_sqrt(spatial_sq) else {
            return Err(OiaError::Format(format!(
                "per-channel plane of {spatial_sq} values is not a perfect square"
            )));
        };
        if s == 0 {
            return Err(OiaError::Format("zero-sized proposal planes".into()));
        }
        // per_block >= 1 here, so n is bounded by the actual payload size.
        proposals.reserve_exact(n);
        for i in 0..n {
            let vals = read_f32_block(&bytes, &mut off, per_block, &format!("proposal {i}"))?;
            proposals.push(Tensor::new(vec![c_local, s, s], vals)?);
        }
    }
    if off != bytes.len() {
        return Err(OiaError::Format(format!(
            "{} unread bytes at end of feature file",
            bytes.len() - off
        )));
    }
    Ok((backbone, proposals))
}
