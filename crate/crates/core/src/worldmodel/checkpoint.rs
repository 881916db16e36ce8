//! Binary checkpoint format shared by every trained network.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes            | field                                   |
//! |------------------|-----------------------------------------|
//! | 8                | magic `PLAYCKPT`                        |
//! | 4 (u32)          | format version, currently 1             |
//! | 4 (u32)          | kind (see [`CheckpointKind`])           |
//! | 4 (u32)          | number of dims `n`                      |
//! | 8·n (u64)        | architecture dims                       |
//! | 8 (u64)          | init seed                               |
//! | 4 (u32)          | member count `k` (1 for single networks)|
//! | 8 (u64)          | parameters per member `p`               |
//! | 8·k·p (f64)      | flattened parameters, member-major      |

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PLAYCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    WorldModel = 1,
    ChangeEnsemble = 2,
    Policy = 3,
    Value = 4,
    LatentEnsemble = 5,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            1 => Self::WorldModel,
            2 => Self::ChangeEnsemble,
            3 => Self::Policy,
            4 => Self::Value,
            5 => Self::LatentEnsemble,
            _ => return Err(Error::Format(format!("unknown checkpoint kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub dims: Vec<u64>,
    pub seed: u64,
    pub members: u32,
}

pub fn encode(header: &CheckpointHeader, members: &[&ParamSet]) -> Vec<u8> {
    let per = members.first().map_or(0, |p| p.num_scalars());
    let mut buf = Vec::with_capacity(40 + 8 * header.dims.len() + 8 * per * members.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.kind as u32).to_le_bytes());
    buf.extend_from_slice(&(header.dims.len() as u32).to_le_bytes());
    for d in &header.dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&header.seed.to_le_bytes());
    buf.extend_from_slice(&(members.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(per as u64).to_le_bytes());
    for m in members {
        for v in m.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = CheckpointKind::from_u32(c.u32()?)?;
    let n = c.u32()? as usize;
    if n > 64 {
        return Err(Error::Format("too many checkpoint dims".into()));
    }
    let dims = (0..n).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let seed = c.u64()?;
    let members = c.u32()?;
    let per = c.u64()? as usize;
    let expected = (members as usize)
        .checked_mul(per)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("checkpoint size overflow".into()))?;
    if bytes.len() - c.pos != expected {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, expected {expected}",
            bytes.len() - c.pos
        )));
    }
    let mut out = Vec::with_capacity(members as usize);
    for _ in 0..members {
        let raw = c.take(per * 8)?;
        out.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    Ok((
        CheckpointHeader {
            kind,
            dims,
            seed,
            members,
        },
        out,
    ))
}

pub fn write(path: &Path, header: &CheckpointHeader, members: &[&ParamSet]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(header, members))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Header only, without materialising the parameters.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    read(path).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sample() -> (CheckpointHeader, ParamSet) {
        let mut p = ParamSet::new();
        p.add("a", Tensor::from_vec(1, 3, vec![1.5, -0.0, f64::MIN_POSITIVE]));
        p.add("b", Tensor::from_vec(2, 1, vec![1e300, -7.25]));
        let h = CheckpointHeader {
            kind: CheckpointKind::Policy,
            dims: vec![80, 64, 4],
            seed: 42,
            members: 1,
        };
        (h, p)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (h, p) = sample();
        let bytes = encode(&h, &[&p]);
        assert_eq!(&bytes[..8], MAGIC);
        // fixed header + 3 dims + 5 values
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 24 + 8 + 4 + 8 + 40);
        let (h2, vals) = decode(&bytes).unwrap();
        assert_eq!(h2, h);
        let bits: Vec<u64> = vals[0].iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = p.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn rejects_corruption() {
        let (h, p) = sample();
        let bytes = encode(&h, &[&p]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode(&bad).is_err());
    }
}
