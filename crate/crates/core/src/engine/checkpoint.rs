//! "OCK1" checkpoint container.
//!
//! Layout (little-endian):
//!   magic "OCK1" | version u16 | config hash (u16 len + utf8)
//!   | resolved config json (u32 len + utf8) | global step u64
//!   | step history (u32 count, then per record: step u64, stage u8,
//!     l_ldm f64, l_p f64, total f64)
//!   | eval history (u32 count, then per record: step u64, miou f64)
//!   | named tensor table (u32 count, then per tensor: name u16 len + utf8,
//!     dtype u8, rank u16, dims u64 each, payload)
//!   | crc32 of all preceding bytes

use std::fs;
use std::path::Path;

use super::train::{EvalRecord, StepRecord};
use crate::error::{OccError, Result};
use crate::params::Params;
use crate::tensor::{Dtype, Real, Tensor};

pub const OCK_MAGIC: &[u8; 4] = b"OCK1";
const OCK_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashPolicy {
    Require,
    Warn,
}

pub struct Checkpoint<T> {
    pub config_hash: String,
    pub config_json: String,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub tensors: Params<T>,
}

fn push_str_u16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    if s.len() > u16::MAX as usize {
        return Err(OccError::FormatError("string too long".into()));
    }
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(OCK_MAGIC);
    out.extend_from_slice(&OCK_VERSION.to_le_bytes());
    push_str_u16(&mut out, &ck.config_hash)?;
    out.extend_from_slice(&(ck.config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.config_json.as_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());

    out.extend_from_slice(&(ck.history.len() as u32).to_le_bytes());
    for r in &ck.history {
        out.extend_from_slice(&r.step.to_le_bytes());
        out.push(r.stage);
        out.extend_from_slice(&r.l_ldm.to_le_bytes());
        out.extend_from_slice(&r.l_p.to_le_bytes());
        out.extend_from_slice(&r.total.to_le_bytes());
    }
    out.extend_from_slice(&(ck.evals.len() as u32).to_le_bytes());
    for r in &ck.evals {
        out.extend_from_slice(&r.step.to_le_bytes());
        out.extend_from_slice(&r.miou.to_le_bytes());
    }

    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in ck.tensors.iter() {
        push_str_u16(&mut out, name)?;
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(OccError::FormatError("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str_u16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| OccError::FormatError("invalid utf8 in checkpoint".into()))
    }
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected_hash: Option<&str>,
    policy: HashPolicy,
) -> Result<Checkpoint<T>> {
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        return Err(OccError::FormatError("checkpoint too short".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let crc_stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != crc_stored {
        return Err(OccError::FormatError("checkpoint checksum mismatch".into()));
    }

    let mut r = Rd { buf: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != OCK_MAGIC {
        return Err(OccError::VersionMismatch(format!(
            "bad checkpoint magic {magic:?}"
        )));
    }
    let version = r.u16()?;
    if version != OCK_VERSION {
        return Err(OccError::VersionMismatch(format!(
            "checkpoint version {version}, supported {OCK_VERSION}"
        )));
    }
    let config_hash = r.str_u16()?;
    let json_len = r.u32()? as usize;
    let config_json = String::from_utf8(r.take(json_len)?.to_vec())
        .map_err(|_| OccError::FormatError("invalid utf8 config".into()))?;
    if let Some(expect) = expected_hash {
        if expect != config_hash {
            match policy {
                HashPolicy::Require => {
                    return Err(OccError::ConfigHashMismatch {
                        expected: config_hash,
                        actual: expect.to_string(),
                    })
                }
                HashPolicy::Warn => {
                    eprintln!(
                        "warning: checkpoint config hash {config_hash} != current {expect}"
                    );
                }
            }
        }
    }
    let step = r.u64()?;

    let n_hist = r.u32()? as usize;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        history.push(StepRecord {
            step: r.u64()?,
            stage: r.u8()?,
            l_ldm: r.f64()?,
            l_p: r.f64()?,
            total: r.f64()?,
        });
    }
    let n_eval = r.u32()? as usize;
    let mut evals = Vec::with_capacity(n_eval);
    for _ in 0..n_eval {
        evals.push(EvalRecord { step: r.u64()?, miou: r.f64()? });
    }

    let n_tensors = r.u32()? as usize;
    let mut tensors = Params::new();
    for _ in 0..n_tensors {
        let name = r.str_u16()?;
        let dtype = Dtype::from_tag(r.u8()?)?;
        if dtype != T::DTYPE {
            return Err(OccError::FormatError(format!(
                "tensor '{name}' stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u16()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::WIDTH)?;
        let data: Vec<T> = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
        tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(OccError::FormatError("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint { config_hash, config_json, step, history, evals, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ck() -> Checkpoint<f32> {
        let mut tensors = Params::new();
        tensors.insert("net/w", Tensor::from_vec(vec![2, 2], vec![1.0, -2.5, 0.25, 7.0]).unwrap());
        tensors.insert("net/b", Tensor::zeros(&[2]));
        Checkpoint {
            config_hash: "abc123".into(),
            config_json: "{\"x\":1}".into(),
            step: 42,
            history: vec![StepRecord { step: 1, stage: 1, l_ldm: 0.9, l_p: 1.7, total: 2.2 }],
            evals: vec![EvalRecord { step: 1, miou: 0.31 }],
            tensors,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ock");
        let p2 = dir.path().join("b.ock");
        let ck = sample_ck();
        save_checkpoint(&ck, &p1).unwrap();
        let loaded = load_checkpoint::<f32>(&p1, Some("abc123"), HashPolicy::Require).unwrap();
        assert_eq!(loaded.step, 42);
        assert!(loaded.tensors.bit_eq(&ck.tensors));
        assert_eq!(loaded.history.len(), 1);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ock");
        save_checkpoint(&sample_ck(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        // fix the crc so the magic check is what fires
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p, None, HashPolicy::Warn),
            Err(OccError::VersionMismatch(_))
        ));
    }

    #[test]
    fn corrupted_body_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ock");
        save_checkpoint(&sample_ck(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p, None, HashPolicy::Warn),
            Err(OccError::FormatError(_))
        ));
    }

    #[test]
    fn hash_mismatch_policied() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ock");
        save_checkpoint(&sample_ck(), &p).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p, Some("other"), HashPolicy::Require),
            Err(OccError::ConfigHashMismatch { .. })
        ));
        assert!(load_checkpoint::<f32>(&p, Some("other"), HashPolicy::Warn).is_ok());
    }
}
