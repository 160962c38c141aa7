//! Nodule samples, the dataset directory format and fold assignment.
//!
//! A dataset directory holds `manifest.jsonl` (one sample per line) plus one
//! raw image file (32x32 little-endian `f32`) and one raw mask file (32x32
//! `u8`, values 0/1) per sample.

mod folds;
mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::RaterScores;

pub use folds::{stratified_kfold, stratum_of, train_val_split, FoldSpec, Stratum, DEFAULT_FOLDS, DEFAULT_VAL_FRACTION};
pub use synthetic::{generate_synthetic, synthesize, LatentAttributes, SyntheticConfig, SyntheticSample};

pub const PATCH: usize = 32;
pub const PATCH_PIXELS: usize = PATCH * PATCH;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major binary segmentation.
    pub mask: Vec<u8>,
    pub ratings: RaterScores,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Vec<f32>, mask: Vec<u8>, ratings: RaterScores) -> Result<Self> {
        let record = Self {
            id: id.into(),
            image,
            mask,
            ratings,
        };
        record.validate()?;
        Ok(record)
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Sample {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.len() != PATCH_PIXELS || self.mask.len() != PATCH_PIXELS {
            return Err(self.fail(format!(
                "expected {PATCH}x{PATCH} image and mask, got {} and {} pixels",
                self.image.len(),
                self.mask.len()
            )));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(self.fail(format!("image intensity {v} outside [0, 1]")));
        }
        if let Some(v) = self.mask.iter().find(|&&m| m > 1) {
            return Err(self.fail(format!("mask value {v} is not 0 or 1")));
        }
        if !self.mask.contains(&1) {
            return Err(self.fail("mask has no foreground pixel"));
        }
        Ok(())
    }

    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Rater scores for the six attributes, in manifest field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub sub: Vec<u8>,
    pub sph: Vec<u8>,
    pub mar: Vec<u8>,
    pub lob: Vec<u8>,
    pub spi: Vec<u8>,
    pub tex: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub malignancy: Vec<u8>,
    pub attributes: AttributeScores,
}

impl ManifestEntry {
    fn for_record(record: &SampleRecord) -> Self {
        let a = record.ratings.attributes();
        Self {
            id: record.id.clone(),
            image: format!("images/{}.f32", record.id),
            mask: format!("masks/{}.u8", record.id),
            malignancy: record.ratings.malignancy().to_vec(),
            attributes: AttributeScores {
                sub: a[0].clone(),
                sph: a[1].clone(),
                mar: a[2].clone(),
                lob: a[3].clone(),
                spi: a[4].clone(),
                tex: a[5].clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Drop samples whose mean malignancy rating is exactly 3.
    pub exclude_mean3: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { exclude_mean3: true }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

fn read_exact_file(path: &Path, id: &str, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::Sample {
        id: id.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    if bytes.len() != expected {
        return Err(Error::Sample {
            id: id.to_string(),
            reason: format!("{} holds {} bytes, expected {expected}", path.display(), bytes.len()),
        });
    }
    Ok(bytes)
}

fn load_entry(dir: &Path, entry: ManifestEntry) -> Result<SampleRecord> {
    let image_bytes = read_exact_file(&dir.join(&entry.image), &entry.id, PATCH_PIXELS * 4)?;
    let mask = read_exact_file(&dir.join(&entry.mask), &entry.id, PATCH_PIXELS)?;
    let image = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let a = entry.attributes;
    let ratings = RaterScores::new(entry.malignancy, [a.sub, a.sph, a.mar, a.lob, a.spi, a.tex]).map_err(|e| {
        Error::Sample {
            id: entry.id.clone(),
            reason: e.to_string(),
        }
    })?;
    SampleRecord::new(entry.id, image, mask, ratings)
}

/// Loads and validates every sample listed in `dir/manifest.jsonl`.
pub fn load_dataset(dir: &Path, options: LoadOptions) -> Result<Vec<SampleRecord>> {
    let entries = read_manifest(dir)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Sample {
                id: entry.id,
                reason: "duplicate id".into(),
            });
        }
        let record = load_entry(dir, entry)?;
        if options.exclude_mean3 && record.ratings.malignancy_mean() == 3.0 {
            continue;
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes `records` in the dataset directory format.
pub fn write_dataset(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut seen = HashSet::new();
    let mut manifest = Vec::new();
    for record in records {
        record.validate()?;
        if !seen.insert(record.id.as_str()) {
            return Err(record.fail("duplicate id"));
        }
        let entry = ManifestEntry::for_record(record);
        let image: Vec<u8> = record.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        let image_path = dir.join(&entry.image);
        fs::write(&image_path, image).map_err(|e| Error::io(&image_path, e))?;
        let mask_path = dir.join(&entry.mask);
        fs::write(&mask_path, &record.mask).map_err(|e| Error::io(&mask_path, e))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&manifest).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
