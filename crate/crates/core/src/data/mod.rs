//! Multi-modal slice records, the dataset directory format, phantom generation
//! and the dynamic patch sampler.

pub mod phantom;
pub mod sampler;
pub mod store;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use phantom::{generate_phantom, PhantomConfig};
pub use sampler::{Batch, DrawItem, ResampleDraw, Sampler, SamplerConfig};
pub use store::{read_dataset, read_manifest, read_record, write_dataset, write_record, Manifest, ManifestEntry};

/// Anatomy label codes.
pub mod ana {
    pub const BACKGROUND: u8 = 0;
    pub const MYO: u8 = 1;
    pub const LV: u8 = 2;
    pub const RV: u8 = 3;
}

/// Pathology bit flags.
pub mod pat {
    pub const INFARCT: u8 = 1;
    pub const EDEMA: u8 = 2;
}

/// One aligned multi-modal slice with its label maps, all `height x width`
/// and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub case_id: String,
    pub slice_id: String,
    pub height: usize,
    pub width: usize,
    pub x_lge: Vec<f32>,
    pub x_t2: Vec<f32>,
    pub x_bssfp: Vec<f32>,
    pub y_ana: Vec<u8>,
    pub y_pat: Vec<u8>,
}

impl SliceRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        let lens = [
            ("lge", self.x_lge.len()),
            ("t2", self.x_t2.len()),
            ("bssfp", self.x_bssfp.len()),
            ("ana", self.y_ana.len()),
            ("pat", self.y_pat.len()),
        ];
        for (field, len) in lens {
            if len != n {
                return Err(Error::Alignment(format!(
                    "{}/{}: {field} has {len} pixels, expected {}x{}",
                    self.case_id, self.slice_id, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        format!("{}_{}", self.case_id, self.slice_id)
    }

    pub fn modalities(&self) -> [&[f32]; 3] {
        [&self.x_lge, &self.x_t2, &self.x_bssfp]
    }

    pub fn has_pathology(&self) -> bool {
        self.y_pat.iter().any(|&p| p != 0)
    }

    pub fn pathology_pixels(&self) -> Vec<usize> {
        self.y_pat
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != 0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub records: Vec<SliceRecord>,
}

impl Dataset {
    pub fn new(image_size: usize, records: Vec<SliceRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
            if r.height != image_size || r.width != image_size {
                return Err(Error::Alignment(format!(
                    "{} is {}x{}, dataset size is {image_size}",
                    r.key(),
                    r.height,
                    r.width
                )));
            }
        }
        Ok(Dataset { image_size, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Case ids in order of first appearance.
    pub fn case_ids(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.records {
            if seen.last() != Some(&r.case_id) && !seen.contains(&r.case_id) {
                seen.push(r.case_id.clone());
            }
        }
        seen
    }

    /// Record indices grouped by case.
    pub fn by_case(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map = BTreeMap::<&str, Vec<usize>>::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(&r.case_id).or_default().push(i);
        }
        map
    }

    /// Indices of the records belonging to any of `cases`.
    pub fn indices_of(&self, cases: &[String]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| cases.contains(&r.case_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Restricts the dataset to the given cases, keeping record order.
    pub fn subset(&self, cases: &[String]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            records: self.indices_of(cases).into_iter().map(|i| self.records[i].clone()).collect(),
        }
    }

    /// Fraction of pixels carrying a nonzero anatomy label.
    pub fn foreground_fraction(&self) -> f64 {
        let (fg, total) = self.records.iter().fold((0usize, 0usize), |(fg, total), r| {
            (fg + r.y_ana.iter().filter(|&&a| a != 0).count(), total + r.y_ana.len())
        });
        fg as f64 / total.max(1) as f64
    }

    /// Fraction of pixels carrying any pathology flag.
    pub fn pathology_fraction(&self) -> f64 {
        let (p, total) = self.records.iter().fold((0usize, 0usize), |(p, total), r| {
            (p + r.y_pat.iter().filter(|&&v| v != 0).count(), total + r.y_pat.len())
        });
        p as f64 / total.max(1) as f64
    }
}
