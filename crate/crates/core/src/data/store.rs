//! Dataset directories: `manifest.toml` at the root plus one NDT1 file per
//! slice and field, named `{case}_{slice}_{field}.ndt`.
//!
//! Images are stored as f32 `[H, W]` tensors, label maps as u8 `[H, W]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SliceRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::sha256_hex;
use crate::tensor::{io, NdTensor};

pub const MANIFEST: &str = "manifest.toml";
pub const FORMAT: &str = "mfunet-dataset-v1";
pub const FIELDS: [&str; 5] = ["lge", "t2", "bssfp", "ana", "pat"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub lge: String,
    pub t2: String,
    pub bssfp: String,
    pub ana: String,
    pub pat: String,
}

impl Checksums {
    fn get(&self, field: &str) -> &str {
        match field {
            "lge" => &self.lge,
            "t2" => &self.t2,
            "bssfp" => &self.bssfp,
            "ana" => &self.ana,
            _ => &self.pat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case: String,
    pub slice: String,
    pub sha256: Checksums,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub image_size: usize,
    #[serde(default, rename = "slice")]
    pub slices: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(image_size: usize) -> Self {
        Manifest {
            format: FORMAT.to_string(),
            image_size,
            slices: Vec::new(),
        }
    }

    pub fn case_count(&self) -> usize {
        let mut cases: Vec<&str> = self.slices.iter().map(|s| s.case.as_str()).collect();
        cases.sort_unstable();
        cases.dedup();
        cases.len()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.format != FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                detail: format!("unknown format {:?}", m.format),
            });
        }
        Ok(m)
    }
}

pub fn file_name(case: &str, slice: &str, field: &str) -> String {
    format!("{case}_{slice}_{field}.ndt")
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
        return Err(Error::Config(format!(
            "identifier {id:?} must be non-empty ASCII alphanumerics or '-'"
        )));
    }
    Ok(())
}

/// Writes the five files of one record and returns its manifest entry.
pub fn write_record(dir: &Path, record: &SliceRecord) -> Result<ManifestEntry> {
    record.validate()?;
    check_id(&record.case_id)?;
    check_id(&record.slice_id)?;
    let shape = [record.height, record.width];
    let image = |data: &[f32]| io::encode(&NdTensor::new(shape.to_vec(), data.to_vec())?);
    let payloads = [
        image(&record.x_lge)?,
        image(&record.x_t2)?,
        image(&record.x_bssfp)?,
        io::encode_u8(&shape, &record.y_ana)?,
        io::encode_u8(&shape, &record.y_pat)?,
    ];
    let mut digests = Vec::with_capacity(5);
    for (field, bytes) in FIELDS.iter().zip(&payloads) {
        io::write_bytes(&dir.join(file_name(&record.case_id, &record.slice_id, field)), bytes)?;
        digests.push(sha256_hex(bytes));
    }
    let mut d = digests.into_iter();
    let mut next = || d.next().expect("five digests");
    Ok(ManifestEntry {
        case: record.case_id.clone(),
        slice: record.slice_id.clone(),
        sha256: Checksums {
            lge: next(),
            t2: next(),
            bssfp: next(),
            ana: next(),
            pat: next(),
        },
    })
}

fn read_field(dir: &Path, entry: &ManifestEntry, field: &str) -> Result<Vec<u8>> {
    let path = dir.join(file_name(&entry.case, &entry.slice, field));
    if !path.exists() {
        return Err(Error::IncompleteRecord {
            record: format!("{}_{}", entry.case, entry.slice),
            field: field.to_string(),
        });
    }
    let bytes = io::read_bytes(&path)?;
    if sha256_hex(&bytes) != entry.sha256.get(field) {
        return Err(Error::corrupt(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

/// Reads and verifies one record listed in the manifest.
pub fn read_record(dir: &Path, entry: &ManifestEntry) -> Result<SliceRecord> {
    let mut images = Vec::with_capacity(3);
    let mut shape = None;
    for field in &FIELDS[..3] {
        let path = dir.join(file_name(&entry.case, &entry.slice, field));
        let t = io::decode::<f32>(&read_field(dir, entry, field)?, &path)?;
        if t.shape().len() != 2 {
            return Err(Error::corrupt(&path, format!("expected a 2-D image, got {:?}", t.shape())));
        }
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Alignment(format!(
                    "{}_{}: {field} is {:?}, lge is {s:?}",
                    entry.case,
                    entry.slice,
                    t.shape()
                )))
            }
            _ => {}
        }
        images.push(t.into_data());
    }
    let shape = shape.expect("three images");
    let mut labels = Vec::with_capacity(2);
    for field in &FIELDS[3..] {
        let path = dir.join(file_name(&entry.case, &entry.slice, field));
        let (s, data) = io::decode_u8(&read_field(dir, entry, field)?, &path)?;
        if s != shape {
            return Err(Error::Alignment(format!(
                "{}_{}: {field} is {s:?}, images are {shape:?}",
                entry.case, entry.slice
            )));
        }
        labels.push(data);
    }
    let mut images = images.into_iter();
    let mut labels = labels.into_iter();
    Ok(SliceRecord {
        case_id: entry.case.clone(),
        slice_id: entry.slice.clone(),
        height: shape[0],
        width: shape[1],
        x_lge: images.next().expect("lge"),
        x_t2: images.next().expect("t2"),
        x_bssfp: images.next().expect("bssfp"),
        y_ana: labels.next().expect("ana"),
        y_pat: labels.next().expect("pat"),
    })
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new(dataset.image_size);
    for record in &dataset.records {
        manifest.slices.push(write_record(dir, record)?);
    }
    io::write_bytes(&dir.join(MANIFEST), manifest.to_toml()?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let records = manifest
        .slices
        .iter()
        .map(|entry| read_record(dir, entry))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.image_size, records)
}
