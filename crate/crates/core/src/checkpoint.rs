//! Binary checkpoint format.
//!
//! ```text
//! "GGNT"            magic
//! u32               format version
//! u32               record count
//! record*           u32 name length, name bytes (UTF-8), u8 dtype,
//!                   u32 rank, rank × u64 extents, little-endian values
//! ```
//!
//! Names are namespaced: `param.*`, `buffer.*`, `momentum.*` and `meta.*`.
//! dtype 0 is f64, 1 is u64 and 2 is UTF-8 text (rank 1, extent = byte
//! length). All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{Architecture, GgNet};
use crate::train::{TrainConfig, Trainer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GGNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::Text(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    fn tensor(name: String, t: &Tensor) -> Self {
        Record { name, shape: t.shape().to_vec(), payload: Payload::F64(t.to_vec()) }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.tag());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("'{name}' has overflowing extents")))?;
        let payload = match tag {
            0 => Payload::F64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            1 => Payload::U64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            2 => Payload::Text(
                String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::Checkpoint(format!("'{name}' is not UTF-8")))?,
            ),
            t => return Err(Error::Checkpoint(format!("'{name}' has unknown dtype tag {t}"))),
        };
        records.push(Record { name, shape, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(records)
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: GgNet,
    pub velocity: Vec<(String, Vec<f64>)>,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        Checkpoint {
            net: tr.net.clone(),
            velocity: tr.opt.velocity().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            epoch: tr.epoch as u64,
            step: tr.step as u64,
            seed: tr.seed,
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        let arch = serde_json::to_string(&self.net.arch).expect("architecture serializes");
        let mut out = vec![
            Record { name: "meta.architecture".into(), shape: vec![arch.len()], payload: Payload::Text(arch) },
            Record { name: "meta.epoch".into(), shape: vec![1], payload: Payload::U64(vec![self.epoch]) },
            Record { name: "meta.step".into(), shape: vec![1], payload: Payload::U64(vec![self.step]) },
            Record { name: "meta.seed".into(), shape: vec![1], payload: Payload::U64(vec![self.seed]) },
        ];
        out.extend(self.net.params.iter().map(|(n, t)| Record::tensor(format!("param.{n}"), t)));
        out.extend(self.net.buffers.iter().map(|(n, t)| Record::tensor(format!("buffer.{n}"), t)));
        for (n, v) in &self.velocity {
            let shape = self.net.params.get(n).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![v.len()]);
            out.push(Record { name: format!("momentum.{n}"), shape, payload: Payload::F64(v.clone()) });
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.to_records())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let records = decode(buf)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record '{name}'")))
        };
        let scalar = |name: &str| match &find(name)?.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Checkpoint(format!("'{name}' must be a single u64"))),
        };
        let arch: Architecture = match &find("meta.architecture")?.payload {
            Payload::Text(s) => serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?,
            _ => return Err(Error::Checkpoint("'meta.architecture' must be text".into())),
        };
        let mut net = GgNet::new(arch, 0)?;
        let (mut n_params, mut n_buffers) = (0, 0);
        let mut velocity = Vec::new();
        for r in &records {
            let as_tensor = || match &r.payload {
                Payload::F64(v) => Ok(Tensor::new(&r.shape, v.clone())?),
                _ => Err(Error::Checkpoint(format!("'{}' must hold f64 values", r.name))),
            };
            if let Some(n) = r.name.strip_prefix("param.") {
                net.params.replace(n, as_tensor()?.requires_grad()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                n_params += 1;
            } else if let Some(n) = r.name.strip_prefix("buffer.") {
                net.buffers.replace(n, as_tensor()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
                n_buffers += 1;
            } else if let Some(n) = r.name.strip_prefix("momentum.") {
                let expected = net.params.get(n).map_err(|e| Error::Checkpoint(e.to_string()))?;
                if expected.shape() != r.shape.as_slice() {
                    return Err(Error::Checkpoint(format!("momentum for '{n}' has shape {:?}", r.shape)));
                }
                velocity.push((n.to_string(), as_tensor()?.to_vec()));
            } else if !r.name.starts_with("meta.") {
                return Err(Error::Checkpoint(format!("unexpected record '{}'", r.name)));
            }
        }
        if n_params != net.params.len() || n_buffers != net.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters and {} buffers, found {n_params} and {n_buffers}",
                net.params.len(),
                net.buffers.len()
            )));
        }
        Ok(Checkpoint { net, velocity, epoch: scalar("meta.epoch")?, step: scalar("meta.step")?, seed: scalar("meta.seed")? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds a trainer positioned right after the saved epoch.
    pub fn into_trainer(self, cfg: TrainConfig, weights: LossWeights) -> Result<Trainer> {
        let mut tr = Trainer::new(self.net, cfg, weights, self.seed)?;
        for (n, v) in self.velocity {
            tr.opt.set_velocity(n, v);
        }
        tr.epoch = self.epoch as usize;
        tr.step = self.step as usize;
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::network::Variant;

    fn net() -> GgNet {
        let arch = Architecture {
            encoder: EncoderConfig {
                stage_channels: [2, 2, 2, 2],
                input_channels: 1,
                aspp_dilations: vec![1],
                aspp_out_channels: 2,
            },
            reduction: 2,
            variant: Variant::FULL,
        };
        GgNet::new(arch, 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = Checkpoint { net: net(), velocity: vec![("head.b".into(), vec![0.25])], epoch: 3, step: 7, seed: 11 };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"GGNT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!((back.epoch, back.step, back.seed), (3, 7, 11));
    }

    #[test]
    fn rejects_unknown_version() {
        let ck = Checkpoint { net: net(), velocity: vec![], epoch: 0, step: 0, seed: 0 };
        let mut bytes = ck.to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = Checkpoint { net: net(), velocity: vec![], epoch: 0, step: 0, seed: 0 }.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn raw_records_round_trip() {
        let recs = vec![
            Record { name: "a".into(), shape: vec![2, 1], payload: Payload::F64(vec![1.5, -0.0]) },
            Record { name: "b".into(), shape: vec![], payload: Payload::U64(vec![9]) },
            Record { name: "c".into(), shape: vec![3], payload: Payload::Text("xyz".into()) },
        ];
        assert_eq!(decode(&encode(&recs)).unwrap(), recs);
    }
}
