//! Binary checkpoint: magic `AMCK`, `u32` version, `u32`-length-prefixed UTF-8
//! architecture JSON, `u64` step, then the parameters as little-endian `f32`
//! in layer order (weights before bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, step: u64, seed: u64) -> Self {
        Self {
            spec: net.spec().clone(),
            step,
            seed,
            params: net.params().to_vec(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        Network::from_params(self.spec, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            network: self.spec.clone(),
            seed: self.seed,
        })
        .expect("spec serializes");
        let n: usize = self.params.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::CorruptPayload(why.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| corrupt("file ends inside the header"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let json = std::str::from_utf8(take(len)?).map_err(|_| corrupt("header is not UTF-8"))?;
        let header: Header =
            serde_json::from_str(json).map_err(|e| Error::CorruptPayload(format!("header: {e}")))?;
        let step = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let payload = &bytes[pos..];
        let shapes = header
            .network
            .param_shapes()
            .map_err(|e| Error::CorruptPayload(format!("architecture: {e}")))?;
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if payload.len() != 4 * total {
            return Err(Error::CorruptPayload(format!(
                "payload has {} bytes, architecture needs {}",
                payload.len(),
                4 * total
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let params = shapes
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, floats.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: header.network,
            step,
            seed: header.seed,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; with `expected`, the stored architecture must match.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(spec) = expected {
        if &ckpt.spec != spec {
            return Err(Error::ArchitectureMismatch);
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::default_embed_net;

    fn sample() -> Checkpoint {
        let net = Network::init(default_embed_net(64, 8).unwrap(), 5).unwrap();
        Checkpoint::from_network(&net, 42, 5)
    }

    #[test]
    fn bytes_roundtrip_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back
            .params
            .iter()
            .zip(&c.params)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptPayload(_))
            ));
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn architecture_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.amck");
        save_checkpoint(&sample(), &path).unwrap();
        let other = default_embed_net(64, 16).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::ArchitectureMismatch)
        ));
        let same = default_embed_net(64, 8).unwrap();
        assert!(load_checkpoint(&path, Some(&same)).is_ok());
    }
}
