//! Binary checkpoints for energy models and autoencoders.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MPDRCKPT` |
//! | 4 | format version (`u32`) |
//! | 8 | descriptor length `L` (`u64`) |
//! | L | JSON [`Descriptor`] |
//! | 8 | parameter count `P` (`u64`) |
//! | 8 P | parameters as `f64`, tensors in descriptor order, row-major |
//! | 8 | checksum (`u64`): first 8 bytes of SHA-256 over everything before it |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Preprocessing;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Autoencoder, EnergyModel, Mlp, MlpSpec};

pub const MAGIC: &[u8; 8] = b"MPDRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    ScalarEnergy,
    ReconstructionEnergy,
    Autoencoder,
}

/// Architecture and metadata stored ahead of the parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: CheckpointKind,
    /// One network for a scalar energy, encoder then decoder otherwise.
    pub networks: Vec<MlpSpec>,
    pub param_shapes: Vec<[usize; 2]>,
    pub preprocessing: Preprocessing,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub networks: Vec<Mlp>,
    pub preprocessing: Preprocessing,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_energy(model: &EnergyModel, preprocessing: Preprocessing, config_hash: impl Into<String>) -> Self {
        let (kind, networks) = match model {
            EnergyModel::Scalar(m) => (CheckpointKind::ScalarEnergy, vec![m.clone()]),
            EnergyModel::Reconstruction(ae) => (
                CheckpointKind::ReconstructionEnergy,
                vec![ae.encoder().clone(), ae.decoder().clone()],
            ),
        };
        Checkpoint {
            kind,
            networks,
            preprocessing,
            config_hash: config_hash.into(),
        }
    }

    pub fn from_autoencoder(ae: &Autoencoder, preprocessing: Preprocessing, config_hash: impl Into<String>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Autoencoder,
            networks: vec![ae.encoder().clone(), ae.decoder().clone()],
            preprocessing,
            config_hash: config_hash.into(),
        }
    }

    fn pair(&self) -> Result<Autoencoder> {
        match &self.networks[..] {
            [e, d] => Autoencoder::new(e.clone(), d.clone()),
            _ => Err(Error::Integrity(format!(
                "{:?} checkpoint holds {} networks, expected 2",
                self.kind,
                self.networks.len()
            ))),
        }
    }

    pub fn energy_model(&self) -> Result<EnergyModel> {
        match self.kind {
            CheckpointKind::ScalarEnergy => match &self.networks[..] {
                [m] => EnergyModel::scalar(m.clone()),
                _ => Err(Error::Integrity(
                    "scalar energy checkpoint must hold one network".into(),
                )),
            },
            CheckpointKind::ReconstructionEnergy => Ok(EnergyModel::Reconstruction(self.pair()?)),
            CheckpointKind::Autoencoder => Err(Error::config("checkpoint holds an autoencoder, not an energy model")),
        }
    }

    pub fn autoencoder(&self) -> Result<Autoencoder> {
        match self.kind {
            CheckpointKind::Autoencoder => self.pair(),
            k => Err(Error::config(format!("checkpoint holds {k:?}, not an autoencoder"))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.networks[0].input_dim()
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor {
            kind: self.kind,
            networks: self.networks.iter().map(|m| m.spec().clone()).collect(),
            param_shapes: self
                .networks
                .iter()
                .flat_map(|m| m.params().iter().map(Tensor::shape))
                .collect(),
            preprocessing: self.preprocessing.clone(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Flattened parameter values in storage order.
    pub fn parameters(&self) -> Vec<f64> {
        self.networks
            .iter()
            .flat_map(|m| m.params().iter().flat_map(|p| p.values().iter().copied()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&self.descriptor()).expect("descriptor serializes");
        let params = self.parameters();
        let mut out = Vec::with_capacity(44 + desc.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(Error::Integrity("truncated checkpoint".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(Error::Integrity("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let dlen = r.u64()? as usize;
        let desc: Descriptor =
            serde_json::from_slice(r.take(dlen)?).map_err(|e| Error::Integrity(format!("descriptor: {e}")))?;
        let count = r.u64()? as usize;
        let expected: usize = desc.param_shapes.iter().map(|[a, b]| a * b).sum();
        if count != expected {
            return Err(Error::Integrity(format!(
                "descriptor expects {expected} parameters, block holds {count}"
            )));
        }
        let raw = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Integrity("parameter count overflows".into()))?,
        )?;
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after parameter block".into()));
        }
        let mut values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut shapes = desc.param_shapes.iter();
        let mut networks = Vec::with_capacity(desc.networks.len());
        for spec in desc.networks {
            let mut params = Vec::new();
            for want in spec.param_shapes() {
                let got = shapes
                    .next()
                    .ok_or_else(|| Error::Integrity("fewer parameter shapes than layers".into()))?;
                if *got != want {
                    return Err(Error::Integrity(format!(
                        "parameter shape {got:?}, architecture needs {want:?}"
                    )));
                }
                let v: Vec<f64> = values.by_ref().take(want[0] * want[1]).collect();
                params.push(Tensor::new(want[0], want[1], v)?);
            }
            networks.push(Mlp::from_params(spec, params).map_err(|e| Error::Integrity(e.to_string()))?);
        }
        if shapes.next().is_some() {
            return Err(Error::Integrity("more parameter shapes than layers".into()));
        }
        let ckpt = Checkpoint {
            kind: desc.kind,
            networks,
            preprocessing: desc.preprocessing,
            config_hash: desc.config_hash,
        };
        match ckpt.kind {
            CheckpointKind::ScalarEnergy => {
                ckpt.energy_model()?;
            }
            _ => {
                ckpt.pair()?;
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Version stored in a checkpoint file, read without validating the rest.
pub fn peek_version(bytes: &[u8]) -> Result<u32> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    Ok(u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")))
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
