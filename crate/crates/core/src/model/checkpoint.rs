//! Self-describing JSON checkpoints.
//!
//! A checkpoint carries the model configuration, the post-merge taxonomy
//! (as sidecar text) together with the fingerprint of the taxonomy it was
//! trained from, the rare-genus relabel map, normalization statistics, and
//! every named parameter tensor as base64 little-endian f32 bytes. Loading
//! rebuilds the detector and validates shapes; evaluation validates the
//! source fingerprint against its own dataset's taxonomy.

use super::{Detector, ModelConfig};
use crate::data::NormalizationStats;
use crate::nn::{HasParams, ParamRef};
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "algaedet.checkpoint.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    /// base64 of little-endian f32 values in row-major order.
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub model: ModelConfig,
    /// Fingerprint of the original (pre-merge) taxonomy sidecar this model
    /// was trained against.
    pub source_taxonomy_fingerprint: String,
    /// Post-merge taxonomy, as sidecar text.
    pub taxonomy_sidecar: String,
    /// Original genus -> merged genus map.
    pub relabel: BTreeMap<String, String>,
    pub stats: NormalizationStats,
    /// Seed used for the train/test split, so evaluation can reproduce the
    /// held-out set.
    #[serde(default)]
    pub split_seed: u64,
    pub params: Vec<ParamBlob>,
}

impl Checkpoint {
    /// Snapshot the current parameters of a detector.
    pub fn capture(
        detector: &mut Detector,
        step: u64,
        source_taxonomy_fingerprint: String,
        taxonomy: &Taxonomy,
        relabel: BTreeMap<String, String>,
        stats: NormalizationStats,
        split_seed: u64,
    ) -> Checkpoint {
        let mut params = Vec::new();
        detector.visit_params(&mut |p: ParamRef<'_>| {
            let mut bytes = Vec::with_capacity(p.v.len() * 4);
            for &v in p.v.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            params.push(ParamBlob { name: p.name, shape: p.shape, data: B64.encode(&bytes) });
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            step,
            model: detector.config.clone(),
            source_taxonomy_fingerprint,
            taxonomy_sidecar: taxonomy.to_sidecar(),
            relabel,
            stats,
            split_seed,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Io(std::io::Error::other(format!("writing checkpoint: {e}"))))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Ingestion(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Ingestion(format!("cannot parse checkpoint {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Ingestion(format!(
                "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// The post-merge taxonomy embedded in the checkpoint.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::from_sidecar(&self.taxonomy_sidecar)
    }

    /// Rebuild a detector and load every parameter tensor into it.
    pub fn restore(&self) -> Result<Detector> {
        self.stats.validate()?;
        let mut det = Detector::new(self.model.clone(), 0)?;
        let blobs: BTreeMap<&str, &ParamBlob> = self.params.iter().map(|b| (b.name.as_str(), b)).collect();
        let mut missing = Vec::new();
        let mut seen = 0usize;
        let mut fail: Option<String> = None;
        det.visit_params(&mut |p: ParamRef<'_>| {
            let Some(blob) = blobs.get(p.name.as_str()) else {
                missing.push(p.name.clone());
                return;
            };
            seen += 1;
            if blob.shape != p.shape {
                fail = Some(format!("parameter {}: shape {:?} vs checkpoint {:?}", p.name, p.shape, blob.shape));
                return;
            }
            match B64.decode(&blob.data) {
                Ok(bytes) if bytes.len() == p.v.len() * 4 => {
                    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                        p.v[i] = f32::from_le_bytes(chunk.try_into().unwrap());
                    }
                }
                Ok(bytes) => {
                    fail = Some(format!("parameter {}: {} bytes for {} values", p.name, bytes.len(), p.v.len()));
                }
                Err(e) => fail = Some(format!("parameter {}: invalid base64: {e}", p.name)),
            }
        });
        if let Some(msg) = fail {
            return Err(Error::Ingestion(msg));
        }
        if !missing.is_empty() {
            return Err(Error::Ingestion(format!("checkpoint missing parameters: {}", missing.join(", "))));
        }
        if seen != self.params.len() {
            return Err(Error::Ingestion(format!(
                "checkpoint has {} parameter tensors, model expects {seen}",
                self.params.len()
            )));
        }
        Ok(det)
    }

    /// Guard for evaluation: the dataset taxonomy must be the one this
    /// model was trained from.
    pub fn validate_source_taxonomy(&self, dataset_taxonomy: &Taxonomy) -> Result<()> {
        let fp = dataset_taxonomy.fingerprint();
        if fp != self.source_taxonomy_fingerprint {
            return Err(Error::Validation(format!(
                "taxonomy fingerprint mismatch: dataset {fp} vs checkpoint {}",
                self.source_taxonomy_fingerprint
            )));
        }
        Ok(())
    }
}
