//! On-disk image datasets.
//!
//! A dataset directory holds `NNNNNN.ppm` originals, optional
//! `NNNNNN.mask.pgm` ground-truth masks and `NNNNNN.aug.ppm` augmented
//! counterparts, plus `manifest.json` with per-entry labels and SHA-256
//! digests of every file.

use crate::codec::{self, CodecError};
use crate::image::{ClassId, Image, SemanticMask};
use crate::validator::RoadCategory;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Codec { path: PathBuf, source: CodecError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{}: digest mismatch", .0.display())]
    Digest(PathBuf),
    #[error("entry {0} has no {1}")]
    Missing(u64, &'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Validator verdict, when one was taken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
    /// Ground-truth validity from a mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_valid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<RoadCategory>,
    pub image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub strategy: String,
    pub seed: u64,
    pub entries: Vec<Entry>,
}

/// Labels attached when adding an entry.
#[derive(Debug, Clone, Copy, Default)]
pub struct EntryLabels {
    pub step: Option<u64>,
    pub view: Option<usize>,
    pub seed: Option<u64>,
    pub valid: Option<bool>,
    pub gt_valid: Option<bool>,
    pub category: Option<RoadCategory>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<String, DatasetError> {
    std::fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub struct DatasetWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl DatasetWriter {
    pub fn create(dir: &Path, domain: &str, strategy: &str, seed: u64) -> Result<Self, DatasetError> {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                domain: domain.to_string(),
                strategy: strategy.to_string(),
                seed,
                entries: Vec::new(),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn add(
        &mut self,
        image: &Image,
        mask: Option<&SemanticMask>,
        aug: Option<&Image>,
        labels: EntryLabels,
    ) -> Result<u64, DatasetError> {
        let id = self.manifest.entries.len() as u64;
        let image_sha256 = write(&self.dir.join(format!("{id:06}.ppm")), &codec::encode_ppm(image))?;
        let mask_sha256 = mask
            .map(|m| write(&self.dir.join(format!("{id:06}.mask.pgm")), &codec::encode_pgm(m)))
            .transpose()?;
        let aug_sha256 = aug
            .map(|a| write(&self.dir.join(format!("{id:06}.aug.ppm")), &codec::encode_ppm(a)))
            .transpose()?;
        self.manifest.entries.push(Entry {
            id,
            step: labels.step,
            view: labels.view,
            seed: labels.seed,
            valid: labels.valid,
            gt_valid: labels.gt_valid,
            category: labels.category,
            image_sha256,
            mask_sha256,
            aug_sha256,
        });
        Ok(id)
    }

    /// Write the manifest; until then the directory is not a dataset.
    pub fn finish(self) -> Result<Dataset, DatasetError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(Dataset {
            dir: self.dir,
            manifest: self.manifest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset, DatasetError> {
        let text = read(&dir.join(MANIFEST))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.manifest.entries
    }

    fn path(&self, id: u64, suffix: &str) -> PathBuf {
        self.dir.join(format!("{id:06}{suffix}"))
    }

    fn checked(&self, path: PathBuf, digest: &str) -> Result<Vec<u8>, DatasetError> {
        let bytes = read(&path)?;
        if sha256_hex(&bytes) != digest {
            return Err(DatasetError::Digest(path));
        }
        Ok(bytes)
    }

    pub fn image(&self, e: &Entry) -> Result<Image, DatasetError> {
        let path = self.path(e.id, ".ppm");
        let bytes = self.checked(path.clone(), &e.image_sha256)?;
        codec::decode_ppm(&bytes).map_err(|source| DatasetError::Codec { path, source })
    }

    pub fn mask(&self, e: &Entry) -> Result<SemanticMask, DatasetError> {
        let digest = e.mask_sha256.as_deref().ok_or(DatasetError::Missing(e.id, "mask"))?;
        let path = self.path(e.id, ".mask.pgm");
        let bytes = self.checked(path.clone(), digest)?;
        codec::decode_pgm(&bytes, &ClassId::ALL).map_err(|source| DatasetError::Codec { path, source })
    }

    pub fn augmented(&self, e: &Entry) -> Result<Image, DatasetError> {
        let digest = e.aug_sha256.as_deref().ok_or(DatasetError::Missing(e.id, "augmented image"))?;
        let path = self.path(e.id, ".aug.ppm");
        let bytes = self.checked(path.clone(), digest)?;
        codec::decode_ppm(&bytes).map_err(|source| DatasetError::Codec { path, source })
    }

    /// Re-hash every file listed in the manifest.
    pub fn verify(&self) -> Result<(), DatasetError> {
        for e in self.entries() {
            self.checked(self.path(e.id, ".ppm"), &e.image_sha256)?;
            if let Some(d) = &e.mask_sha256 {
                self.checked(self.path(e.id, ".mask.pgm"), d)?;
            }
            if let Some(d) = &e.aug_sha256 {
                self.checked(self.path(e.id, ".aug.ppm"), d)?;
            }
        }
        Ok(())
    }
}
