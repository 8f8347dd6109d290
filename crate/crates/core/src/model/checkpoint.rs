//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "FRSCKPT\0"
//! version      u32       CHECKPOINT_FORMAT_VERSION
//! header_len   u64
//! header       JSON      {format_version, config, provenance, tensors: [{name, shape}]}
//! data         f32 × Σ|tensor|, tensors in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FRSCKPT\0";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    /// Content hashes of the manifests trained on, in order.
    pub dataset_hashes: Vec<String>,
    pub epochs: usize,
    /// Mean loss per epoch, across all stages.
    pub loss_curve: Vec<f64>,
    /// Human-readable stage log.
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ClassifierConfig,
    provenance: TrainingProvenance,
    tensors: Vec<TensorSpec>,
}

/// Persisted model: configuration, `f32` parameters and training history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ClassifierConfig,
    pub provenance: TrainingProvenance,
    tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    /// Fresh checkpoint with initialized weights.
    pub fn init(config: ClassifierConfig) -> Result<Self> {
        Ok(Self::from_network(&Network::new(config)?, TrainingProvenance::default()))
    }

    pub fn from_network(net: &Network, provenance: TrainingProvenance) -> Self {
        let tensors = net.params().iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect();
        Self { config: net.config().clone(), provenance, tensors }
    }

    pub fn network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.clone())?;
        let params = net.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::BadCheckpoint(format!("{} tensors for {} parameters", self.tensors.len(), params.len())));
        }
        for (p, t) in params.into_iter().zip(&self.tensors) {
            if p.len() != t.len() {
                return Err(Error::BadCheckpoint(format!("tensor of {} values where {} expected", t.len(), p.len())));
            }
            for (dst, src) in p.iter_mut().zip(t) {
                *dst = *src as f64;
            }
        }
        Ok(net)
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.tensors
    }

    /// Class probabilities for one image.
    pub fn forward(&self, img: &crate::ImageBuffer) -> Result<Vec<f64>> {
        self.network()?.forward(img)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = Network::new(self.config.clone())?;
        let tensors = net.param_specs().into_iter().map(|(name, shape)| TensorSpec { name, shape }).collect();
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let expected = Network::new(header.config.clone())?.param_specs();
        let declared: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if declared != expected {
            return Err(bad("tensor shapes do not match the configuration"));
        }
        let mut data = &bytes[20 + header_len..];
        let mut tensors = Vec::with_capacity(expected.len());
        for (_, shape) in &expected {
            let n: usize = shape.iter().product();
            let chunk = data.get(..4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            tensors.push(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
            data = &data[4 * n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config: header.config, provenance: header.provenance, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&crate::error::read_file(path)?)
    }
}
