use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Stage;
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const FORMAT_VERSION: u16 = 1;
const HASH_LEN: usize = 32;

/// One training stage in a checkpoint's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub plan_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub label_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Oldest stage first.
    pub provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    provenance: Vec<Provenance>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corruption(detail.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("record at byte {} runs past the end", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    put_u32(out, t.numel())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(network: Network, provenance: Vec<Provenance>) -> Self {
        Self { network, provenance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&Manifest {
            spec: self.network.spec().clone(),
            provenance: self.provenance.clone(),
        })
        .map_err(|e| Error::Data(format!("cannot encode manifest: {e}")))?;
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        let params = self.network.params();
        let buffers = self.network.buffers();
        put_u32(&mut out, params.len() + buffers.len())?;
        for (name, t) in params {
            put_tensor(&mut out, name, 0, t)?;
        }
        for (name, t) in buffers {
            put_tensor(&mut out, name, 1, t)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        if bytes.len() < 6 {
            return Err(corrupt("file ends inside the header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("checkpoint version {version}, expected {FORMAT_VERSION}"),
            });
        }
        if bytes.len() < 6 + HASH_LEN {
            return Err(corrupt("file too short for its content hash"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt("content hash mismatch"));
        }
        let mut cur = Cursor { bytes: body, at: 6 };
        let mlen = cur.u32()?;
        let manifest: Manifest =
            serde_json::from_slice(cur.take(mlen)?).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        let count = cur.u32()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for _ in 0..count {
            let nlen = cur.u32()?;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let kind = cur.u8()?;
            let rank = cur.u32()?;
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let numel = cur.u32()?;
            let raw = cur.take(numel.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
            let slot = match kind {
                0 => &mut params,
                1 => &mut buffers,
                k => return Err(corrupt(format!("unknown tensor kind {k}"))),
            };
            if slot.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        if cur.at != body.len() {
            return Err(corrupt(format!(
                "{} unexpected bytes before the hash",
                body.len() - cur.at
            )));
        }
        let network = Network::from_parts(manifest.spec, params, buffers)?;
        Ok(Self {
            network,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
