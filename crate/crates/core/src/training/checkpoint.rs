//! Binary checkpoint: magic, version, JSON header, little-endian f32 blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{Aligner, AlignerConfig};
use crate::encoder::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::explainer::{Explainer, ExplainerConfig, Vocabulary};
use crate::numerics::{Params, Real};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FAECKPT\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ExplainerBundle<T: Real = f32> {
    pub explainer: Explainer<T>,
    pub aligner: Aligner<T>,
    pub vocabulary: Vocabulary,
}

/// Classifier, optionally with a trained explainer, plus the config used to build them.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real = f32> {
    pub classifier: Classifier<T>,
    pub explainer: Option<ExplainerBundle<T>>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    classifier: ClassifierConfig,
    explainer: Option<ExplainerConfig>,
    aligner: Option<AlignerConfig>,
    vocabulary: Option<Vocabulary>,
    config: serde_json::Value,
    manifest: Vec<ManifestEntry>,
    blob_len: usize,
}

impl<T: Real> Checkpoint<T> {
    fn param_sets(&self) -> Vec<&Params<T>> {
        let mut sets = vec![&self.classifier.params];
        if let Some(b) = &self.explainer {
            sets.push(&b.explainer.params);
            sets.push(&b.aligner.params);
        }
        sets
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        let mut blob = Vec::new();
        for set in self.param_sets() {
            for (name, t) in set.iter() {
                manifest.push(ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: blob.len(),
                });
                for v in t.data() {
                    blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
        let header = Header {
            classifier: self.classifier.config,
            explainer: self.explainer.as_ref().map(|b| b.explainer.config),
            aligner: self.explainer.as_ref().map(|b| b.aligner.config),
            vocabulary: self.explainer.as_ref().map(|b| b.vocabulary.clone()),
            config: self.config.clone(),
            manifest,
            blob_len: blob.len(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated checkpoint header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob = &bytes[header_end..];
        if blob.len() != header.blob_len {
            return Err(Error::Format(format!(
                "checkpoint blob is {} bytes, header declares {}",
                blob.len(),
                header.blob_len
            )));
        }
        let mut expected = 0;
        let mut values = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let len = e.shape.iter().product::<usize>() * 4;
            if e.offset != expected || e.offset + len > blob.len() {
                return Err(Error::Format(format!("parameter {} has a bad offset", e.name)));
            }
            expected += len;
            let data: Vec<T> = blob[e.offset..e.offset + len]
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect();
            values.push((e, data));
        }
        if expected != blob.len() {
            return Err(fmt("checkpoint blob has unreferenced bytes"));
        }
        let take = |prefix: &str| -> Vec<(&str, &[usize], Vec<T>)> {
            values
                .iter()
                .filter(|(e, _)| e.name.starts_with(prefix))
                .map(|(e, d)| (e.name.as_str(), e.shape.as_slice(), d.clone()))
                .collect()
        };
        if let Some((e, _)) = values
            .iter()
            .find(|(e, _)| !["classifier.", "explainer.", "aligner."].iter().any(|p| e.name.starts_with(p)))
        {
            return Err(Error::Format(format!("unknown parameter {}", e.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut classifier = Classifier::new(header.classifier, &mut rng);
        classifier.params.load_values(take("classifier."))?;
        let explainer = match (header.explainer, header.aligner, header.vocabulary) {
            (None, None, None) => {
                if !take("explainer.").is_empty() || !take("aligner.").is_empty() {
                    return Err(fmt("explainer parameters without an explainer config"));
                }
                None
            }
            (Some(ec), Some(ac), Some(vocabulary)) => {
                let mut explainer = Explainer::new(ec, &mut rng).map_err(|e| Error::Format(e.to_string()))?;
                explainer.params.load_values(take("explainer."))?;
                let mut aligner = Aligner::new(ac, &mut rng).map_err(|e| Error::Format(e.to_string()))?;
                aligner.params.load_values(take("aligner."))?;
                if vocabulary.len() != ec.vocab_size {
                    return Err(fmt("vocabulary size disagrees with the explainer config"));
                }
                Some(ExplainerBundle {
                    explainer,
                    aligner,
                    vocabulary,
                })
            }
            _ => return Err(fmt("incomplete explainer section")),
        };
        Ok(Self {
            classifier,
            explainer,
            config: header.config,
        })
    }
}

pub fn save_checkpoint<T: Real>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    crate::synthdata::write_file(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
