//! Dynamic patch resampling.
//!
//! Every iteration draws a patch size `d = size_base + size_step * i` with `i`
//! uniform over the index range, a batch size `floor(d0^2 n0 / d^2)` from the
//! fixed pixel budget, and for each item either a pathology-centred crop
//! (probability `rho_c`) or a uniformly placed one. Draws are a pure function
//! of `(seed, iteration)`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::NdTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub rho_c: f64,
    pub size_base: usize,
    pub size_step: usize,
    pub size_index_min: usize,
    pub size_index_max: usize,
    pub d0: usize,
    pub n0: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rho_c: 0.89,
            size_base: 96,
            size_step: 16,
            size_index_min: 0,
            size_index_max: 12,
            d0: 288,
            n0: 4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Patch sizes 32..=96 on 96-pixel phantoms with a budget of four full slices.
    pub fn desk() -> Self {
        SamplerConfig {
            size_base: 32,
            size_step: 16,
            size_index_max: 4,
            d0: 96,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho_c) {
            return Err(Error::Config(format!("rho_c must lie in [0, 1], got {}", self.rho_c)));
        }
        if self.size_base == 0 || self.n0 == 0 {
            return Err(Error::Config("size_base and n0 must be positive".into()));
        }
        if self.size_index_min > self.size_index_max {
            return Err(Error::Config("size_index_min exceeds size_index_max".into()));
        }
        if self.size_base + self.size_step * self.size_index_max != self.d0 {
            return Err(Error::Config(format!(
                "size_base + size_step * size_index_max = {} must equal d0 = {}",
                self.size_base + self.size_step * self.size_index_max,
                self.d0
            )));
        }
        Ok(())
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        (self.size_index_min..=self.size_index_max)
            .map(|i| self.size_base + self.size_step * i)
            .collect()
    }

    pub fn pixel_budget(&self) -> usize {
        self.d0 * self.d0 * self.n0
    }

    /// Largest batch whose pixel count stays within the budget.
    pub fn batch_size_for(&self, d: usize) -> usize {
        batch_size_for(d, self)
    }
}

pub fn draw_patch_size<R: Rng>(rng: &mut R, cfg: &SamplerConfig) -> usize {
    let i = rng.random_range(cfg.size_index_min..=cfg.size_index_max);
    cfg.size_base + cfg.size_step * i
}

pub fn batch_size_for(d: usize, cfg: &SamplerConfig) -> usize {
    (cfg.pixel_budget() / (d * d).max(1)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawItem {
    /// Index into the dataset's records.
    pub record: usize,
    pub top: usize,
    pub left: usize,
    pub pathology_centered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleDraw {
    pub iteration: u64,
    pub d_t: usize,
    pub n_t: usize,
    pub items: Vec<DrawItem>,
}

/// Cropped and stacked tensors of one draw.
#[derive(Debug, Clone)]
pub struct Batch {
    pub draw: ResampleDraw,
    /// `[n, 1, d, d]` each, in `lge, t2, bssfp` order.
    pub images: [NdTensor<f32>; 3],
    /// `[n, d, d]` anatomy codes.
    pub y_ana: Vec<u8>,
    /// `[n, d, d]` pathology bits.
    pub y_pat: Vec<u8>,
}

/// Draws batches from a fixed pool of records.
#[derive(Debug)]
pub struct Sampler {
    config: SamplerConfig,
    pool: Vec<usize>,
    /// Records of the pool containing pathology, with their pathology pixels.
    pathology: Vec<(usize, Vec<usize>)>,
    image_size: usize,
    warned: AtomicBool,
}

impl Sampler {
    pub fn new(dataset: &Dataset, pool: Vec<usize>, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if pool.is_empty() {
            return Err(Error::Config("sampler pool is empty".into()));
        }
        if let Some(&bad) = pool.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Config(format!("record index {bad} out of range")));
        }
        if config.d0 > dataset.image_size {
            return Err(Error::Config(format!(
                "patch size {} exceeds the image size {}",
                config.d0, dataset.image_size
            )));
        }
        let pathology = pool
            .iter()
            .filter_map(|&i| {
                let px = dataset.records[i].pathology_pixels();
                (!px.is_empty()).then_some((i, px))
            })
            .collect();
        Ok(Sampler {
            config,
            pool,
            pathology,
            image_size: dataset.image_size,
            warned: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    fn rng(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration);
        rng
    }

    /// The resampling decision for one iteration.
    pub fn draw(&self, iteration: u64) -> ResampleDraw {
        let cfg = &self.config;
        let mut rng = self.rng(iteration);
        let d = draw_patch_size(&mut rng, cfg);
        let n = batch_size_for(d, cfg);
        let span = self.image_size - d;
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let wants_pathology = rng.random_bool(cfg.rho_c);
            if wants_pathology && !self.pathology.is_empty() {
                let (record, pixels) = &self.pathology[rng.random_range(0..self.pathology.len())];
                let p = pixels[rng.random_range(0..pixels.len())];
                let (row, col) = (p / self.image_size, p % self.image_size);
                let clamp = |c: usize| c.saturating_sub(d / 2).min(span);
                items.push(DrawItem {
                    record: *record,
                    top: clamp(row),
                    left: clamp(col),
                    pathology_centered: true,
                });
            } else {
                if wants_pathology && !self.warned.swap(true, Ordering::Relaxed) {
                    log::warn!("no pathology-bearing slice in the sampling pool; using uniform crops");
                }
                items.push(DrawItem {
                    record: self.pool[rng.random_range(0..self.pool.len())],
                    top: rng.random_range(0..=span),
                    left: rng.random_range(0..=span),
                    pathology_centered: false,
                });
            }
        }
        ResampleDraw {
            iteration,
            d_t: d,
            n_t: n,
            items,
        }
    }

    /// Full-size slices at the fixed batch `n0`, drawn uniformly from the pool.
    pub fn draw_full(&self, iteration: u64) -> ResampleDraw {
        let mut rng = self.rng(iteration);
        let items = (0..self.config.n0)
            .map(|_| DrawItem {
                record: self.pool[rng.random_range(0..self.pool.len())],
                top: 0,
                left: 0,
                pathology_centered: false,
            })
            .collect();
        ResampleDraw {
            iteration,
            d_t: self.image_size,
            n_t: self.config.n0,
            items,
        }
    }

    pub fn sample_batch(&self, dataset: &Dataset, iteration: u64, resample: bool) -> Result<Batch> {
        let draw = if resample { self.draw(iteration) } else { self.draw_full(iteration) };
        assemble(dataset, draw)
    }

    /// Produces batches for `iterations` on a worker thread with a queue of two,
    /// handing each to `consume` in iteration order.
    pub fn prefetch<F>(&self, dataset: &Dataset, iterations: std::ops::Range<u64>, resample: bool, mut consume: F) -> Result<()>
    where
        F: FnMut(Batch) -> Result<()>,
    {
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
            scope.spawn(move || {
                for t in iterations {
                    if tx.send(self.sample_batch(dataset, t, resample)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                consume(batch?)?;
            }
            Ok(())
        })
    }
}

/// Crops every item of `draw` out of its record.
pub fn assemble(dataset: &Dataset, draw: ResampleDraw) -> Result<Batch> {
    let (n, d, size) = (draw.n_t, draw.d_t, dataset.image_size);
    let plane = d * d;
    let mut images = [vec![0f32; n * plane], vec![0f32; n * plane], vec![0f32; n * plane]];
    let mut y_ana = vec![0u8; n * plane];
    let mut y_pat = vec![0u8; n * plane];
    for (k, item) in draw.items.iter().enumerate() {
        if item.top + d > size || item.left + d > size {
            return Err(Error::Config(format!(
                "crop at ({}, {}) of size {d} leaves the {size}x{size} image",
                item.top, item.left
            )));
        }
        let record = dataset
            .records
            .get(item.record)
            .ok_or_else(|| Error::Config(format!("record index {} out of range", item.record)))?;
        for r in 0..d {
            let src = (item.top + r) * size + item.left;
            let dst = k * plane + r * d;
            for (img, m) in images.iter_mut().zip(record.modalities()) {
                img[dst..dst + d].copy_from_slice(&m[src..src + d]);
            }
            y_ana[dst..dst + d].copy_from_slice(&record.y_ana[src..src + d]);
            y_pat[dst..dst + d].copy_from_slice(&record.y_pat[src..src + d]);
        }
    }
    let [a, b, c] = images;
    let shape = vec![n, 1, d, d];
    Ok(Batch {
        draw,
        images: [
            NdTensor::new(shape.clone(), a)?,
            NdTensor::new(shape.clone(), b)?,
            NdTensor::new(shape, c)?,
        ],
        y_ana,
        y_pat,
    })
}
