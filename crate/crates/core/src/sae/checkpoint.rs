//! `SAEM` checkpoint container.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "SAEM"
//! 4       1      version (1)
//! 5       1      arch id (0 topk, 1 batchtopk, 2 relu, 3 jumprelu)
//! 6       1      tied (0/1)
//! 7       1      layer_norm (0/1)
//! 8       4      d            u32 LE
//! 12      4      M            u32 LE
//! 16      4      k_active     u32 LE
//! 20      8      bandwidth    f64 LE
//! 28      ...    f64 LE blobs: W_enc (M·d, row-major), b_enc (M),
//!                W_dec (d·M, row-major), b_dec (d), log_thresholds (M)
//!         8·M    dead_steps   u64 LE
//!         4      config length u32 LE
//!         ...    training config, UTF-8 JSON
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Arch, SaeModel, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SAEM";
pub const VERSION: u8 = 1;

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `model` with `config` embedded for provenance.
pub fn encode_checkpoint(model: &SaeModel, config: &TrainConfig) -> Result<Vec<u8>> {
    let (m, d) = (model.n_latents(), model.dim());
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} too large for checkpoint")))
    };
    let mut out = Vec::with_capacity(28 + 8 * (2 * m * d + 3 * m + d));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(model.arch.id());
    out.push(model.tied as u8);
    out.push(model.layer_norm as u8);
    out.extend_from_slice(&to_u32(d, "dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m, "n_latents")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.k_active, "k_active")?.to_le_bytes());
    out.extend_from_slice(&model.bandwidth.to_le_bytes());
    put_f64s(&mut out, model.w_enc.as_standard_layout().iter());
    put_f64s(&mut out, &model.b_enc);
    put_f64s(&mut out, model.w_dec.as_standard_layout().iter());
    put_f64s(&mut out, &model.b_dec);
    put_f64s(&mut out, &model.log_thresholds);
    for c in &model.dead_steps {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let json = serde_json::to_vec(config)?;
    out.extend_from_slice(&to_u32(json.len(), "config")?.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::TruncatedPayload {
            expected: u64::MAX,
            found: self.buf.len() as u64,
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses a checkpoint, returning the model and its embedded config.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(SaeModel, TrainConfig)> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let arch_id = cur.u8()?;
    let arch = Arch::from_id(arch_id)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown arch id {arch_id}")))?;
    let tied = cur.u8()? != 0;
    let layer_norm = cur.u8()? != 0;
    let d = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let k_active = cur.u32()? as usize;
    let bandwidth = cur.f64()?;

    let shape_err = |_| Error::InvalidConfig("checkpoint shape".into());
    let w_enc = Array2::from_shape_vec((m, d), cur.f64s(m * d)?).map_err(shape_err)?;
    let b_enc = Array1::from(cur.f64s(m)?);
    let w_dec = Array2::from_shape_vec((d, m), cur.f64s(d * m)?).map_err(shape_err)?;
    let b_dec = Array1::from(cur.f64s(d)?);
    let log_thresholds = Array1::from(cur.f64s(m)?);
    let dead_steps = (0..m).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    let json_len = cur.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(cur.take(json_len)?)?;
    if cur.pos != buf.len() {
        return Err(Error::TrailingBytes((buf.len() - cur.pos) as u64));
    }

    Ok((
        SaeModel {
            arch,
            tied,
            layer_norm,
            k_active,
            bandwidth,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            log_thresholds,
            dead_steps,
        },
        config,
    ))
}

pub fn write_checkpoint(path: &Path, model: &SaeModel, config: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(model, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(SaeModel, TrainConfig)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
