//! Trajectories and the append-only replay buffer with its on-disk journal.
//!
//! Journal layout: the 8-byte magic `PLAYRPLY` and a `u32` format version,
//! followed by records. Each record is a `u32` payload length, the payload,
//! and a `u32` FNV-1a checksum of the payload. The payload holds
//!
//! ```text
//! u32 record version | u64 episode_index | u64 seed
//! u16 len + utf8 region | u16 len + utf8 method | u8 success | f64 total_change
//! u32 frames | u32 obs_pixels | u32 action_dim | u32 change_pixels
//! per frame: obs f32[obs_pixels] | action f64[action_dim] | change bits[ceil(change_pixels/8)]
//! ```
//!
//! All numbers are little-endian. A truncated or corrupt trailing record
//! (a crash mid-write) is dropped when the journal is reopened.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOURNAL_MAGIC: &[u8; 8] = b"PLAYRPLY";
pub const JOURNAL_VERSION: u32 = 1;
const RECORD_VERSION: u32 = 1;

/// Observation before the action, the executed action, and the change label.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub observation: Vec<f32>,
    pub action: Vec<f64>,
    pub change: Vec<bool>,
}

impl Frame {
    pub fn observation_f64(&self) -> Vec<f64> {
        self.observation.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn change_f64(&self) -> Vec<f64> {
        self.change.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn change_norm(&self) -> f64 {
        self.change.iter().filter(|&&b| b).count() as f64 / self.change.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub episode_index: u64,
    /// Reset seed; replaying it reproduces the start state.
    pub seed: u64,
    pub region_id: String,
    pub method: String,
    /// Task predicate held at some visited state.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub frames: Vec<Frame>,
    pub total_change: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn observations_f64(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(Frame::observation_f64).collect()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.action.clone()).collect()
    }

    pub fn changes_f64(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(Frame::change_f64).collect()
    }

    /// Returns the sum of frame change norms.
    pub fn recomputed_total(&self) -> f64 {
        self.frames.iter().map(Frame::change_norm).sum()
    }
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format("string too long for journal".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    let first = t.frames.first().ok_or(Error::EmptyTrajectory)?;
    let (px, ad, cp) = (first.observation.len(), first.action.len(), first.change.len());
    let mut buf = Vec::with_capacity(64 + t.frames.len() * (4 * px + 8 * ad + cp.div_ceil(8)));
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&t.meta.episode_index.to_le_bytes());
    buf.extend_from_slice(&t.meta.seed.to_le_bytes());
    put_str(&mut buf, &t.meta.region_id)?;
    put_str(&mut buf, &t.meta.method)?;
    buf.push(u8::from(t.meta.success));
    buf.extend_from_slice(&t.total_change.to_le_bytes());
    for v in [t.frames.len(), px, ad, cp] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in &t.frames {
        if f.observation.len() != px || f.action.len() != ad || f.change.len() != cp {
            return Err(Error::dims("uniform frame sizes", "ragged trajectory"));
        }
        for v in &f.observation {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &f.action {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for chunk in f.change.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                byte |= u8::from(b) << i;
            }
            buf.push(byte);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Format("journal record truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("journal string is not utf-8".into()))
    }
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader { b: bytes, pos: 0 };
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let episode_index = r.u64()?;
    let seed = r.u64()?;
    let region_id = r.string()?;
    let method = r.string()?;
    let success = r.u8()? != 0;
    let total_change = r.f64()?;
    let n = r.u32()? as usize;
    let px = r.u32()? as usize;
    let ad = r.u32()? as usize;
    let cp = r.u32()? as usize;
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let observation = r
            .take(4 * px)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        let action = (0..ad).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let packed = r.take(cp.div_ceil(8))?;
        let change = (0..cp).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        frames.push(Frame {
            observation,
            action,
            change,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in journal record".into()));
    }
    Ok(Trajectory {
        meta: TrajectoryMeta {
            episode_index,
            seed,
            region_id,
            method,
            success,
        },
        frames,
        total_change,
    })
}

/// Append-only trajectory store, optionally mirrored to a journal file.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
    journal: Option<(PathBuf, File)>,
}

impl ReplayBuffer {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a journal and loads every complete record in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut trajectories = Vec::new();
        let mut good_end = 12;
        if bytes.len() < 12 {
            if !bytes.is_empty() && !JOURNAL_MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
                return Err(Error::Format(format!("{} is not a replay journal", path.display())));
            }
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(JOURNAL_MAGIC)?;
            file.write_all(&JOURNAL_VERSION.to_le_bytes())?;
        } else {
            if &bytes[..8] != JOURNAL_MAGIC {
                return Err(Error::Format(format!("{} is not a replay journal", path.display())));
            }
            let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4"));
            if version != JOURNAL_VERSION {
                return Err(Error::Format(format!("unsupported journal version {version}")));
            }
            let mut pos = 12;
            while pos + 4 <= bytes.len() {
                let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4")) as usize;
                let end = pos + 4 + len + 4;
                if end > bytes.len() {
                    break;
                }
                let payload = &bytes[pos + 4..pos + 4 + len];
                let sum = u32::from_le_bytes(bytes[end - 4..end].try_into().expect("4"));
                if sum != fnv1a(payload) {
                    break;
                }
                match decode_trajectory(payload) {
                    Ok(t) => trajectories.push(t),
                    Err(_) => break,
                }
                pos = end;
                good_end = pos;
            }
            if good_end < bytes.len() {
                log::warn!(
                    "dropping {} bytes of incomplete journal tail in {}",
                    bytes.len() - good_end,
                    path.display()
                );
                file.set_len(good_end as u64)?;
            }
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            trajectories,
            journal: Some((path.to_path_buf(), file)),
        })
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|(p, _)| p.as_path())
    }

    /// Appends a trajectory, writing it through to the journal first.
    pub fn push(&mut self, t: Trajectory) -> Result<()> {
        if let Some((_, file)) = &mut self.journal {
            let payload = encode_trajectory(&t)?;
            let mut rec = Vec::with_capacity(payload.len() + 8);
            rec.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            rec.extend_from_slice(&payload);
            rec.extend_from_slice(&fnv1a(&payload).to_le_bytes());
            file.write_all(&rec)?;
            file.flush()?;
        }
        self.trajectories.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.trajectories.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    pub fn as_slice(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn totals(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.total_change).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(index: u64, len: usize) -> Trajectory {
        let frames = (0..len)
            .map(|t| Frame {
                observation: (0..16).map(|i| (i as f32 + t as f32) / 40.0).collect(),
                action: vec![0.1 * t as f64, -0.5, 1.0, 0.0],
                change: (0..12).map(|i| (i + t) % 3 == 0).collect(),
            })
            .collect::<Vec<_>>();
        let mut t = Trajectory {
            meta: TrajectoryMeta {
                episode_index: index,
                seed: 100 + index,
                region_id: "door".into(),
                method: "random".into(),
                success: index % 2 == 0,
            },
            frames,
            total_change: 0.0,
        };
        t.total_change = t.recomputed_total();
        t
    }

    #[test]
    fn record_roundtrip_is_exact() {
        let t = toy(3, 5);
        assert_eq!(decode_trajectory(&encode_trajectory(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn journal_reload_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        {
            let mut r = ReplayBuffer::open(&path).unwrap();
            for i in 0..3 {
                r.push(toy(i, 4)).unwrap();
            }
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let r = ReplayBuffer::open(&path).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.get(2).unwrap(), &toy(2, 4));
        drop(r);
        // simulate a crash halfway through a fourth record
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[200, 1, 0, 0, 1, 2, 3]).unwrap();
        drop(f);
        let mut r = ReplayBuffer::open(&path).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), full);
        r.push(toy(3, 4)).unwrap();
        drop(r);
        assert_eq!(ReplayBuffer::open(&path).unwrap().len(), 4);
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"hello world, not a journal").unwrap();
        assert!(ReplayBuffer::open(&path).is_err());
    }
}
