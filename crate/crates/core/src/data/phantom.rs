//! Synthetic short-axis cardiac phantoms with exact labels.
//!
//! Each slice holds an elliptical LV blood pool, a myocardial ring, an RV
//! crescent and a body ellipse. Pathology lives in angular sectors of the
//! ring: an infarct sector (probability `infarct_prob`) always wrapped by a
//! wider edema sector, or an edema-only sector (probability `edema_only_prob`)
//! when no infarct is drawn. The three renderings differ in contrast: bSSFP
//! shows anatomy only, LGE makes the infarct bright and edema faint, T2 makes
//! edema bright and the infarct ambiguous.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ana, pat, Dataset, SliceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_cases: usize,
    pub slices_per_case: usize,
    pub seed: u64,
    pub infarct_prob: f64,
    pub edema_only_prob: f64,
    pub noise_sigma: f64,
    pub bias_strength: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 96,
            n_cases: 25,
            slices_per_case: 4,
            seed: 0,
            infarct_prob: 0.7,
            edema_only_prob: 0.2,
            noise_sigma: 0.03,
            bias_strength: 0.1,
        }
    }
}

impl PhantomConfig {
    pub const MIN_SIZE: usize = 96;

    pub fn validate(&self) -> Result<()> {
        if self.size < Self::MIN_SIZE {
            return Err(Error::Config(format!(
                "phantom size {} is below the minimum patch size {}",
                self.size,
                Self::MIN_SIZE
            )));
        }
        if self.n_cases == 0 || self.slices_per_case == 0 {
            return Err(Error::Config("phantoms need at least one case and one slice".into()));
        }
        for (name, p) in [("infarct_prob", self.infarct_prob), ("edema_only_prob", self.edema_only_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.bias_strength >= 0.0) {
            return Err(Error::Config("noise_sigma and bias_strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tissue intensities per modality, `[lge, t2, bssfp]`.
struct Tissue([f64; 3]);

const AIR: Tissue = Tissue([0.04, 0.05, 0.05]);
const BODY: Tissue = Tissue([0.32, 0.40, 0.45]);
const BLOOD: Tissue = Tissue([0.50, 0.30, 0.90]);
const MYO: Tissue = Tissue([0.12, 0.28, 0.22]);
const INFARCT: Tissue = Tissue([0.92, 0.55, 0.25]);
const EDEMA: Tissue = Tissue([0.24, 0.88, 0.25]);

#[derive(Debug, Clone, Copy)]
struct Sector {
    center: f64,
    half_width: f64,
}

impl Sector {
    fn contains(&self, angle: f64) -> bool {
        let mut d = (angle - self.center).rem_euclid(2.0 * PI);
        if d > PI {
            d = 2.0 * PI - d;
        }
        d <= self.half_width
    }
}

struct CaseGeometry {
    cx: f64,
    cy: f64,
    r_lv: f64,
    thickness: f64,
    ecc: f64,
    tilt: f64,
    rv_dir: f64,
    body_a: f64,
    body_b: f64,
}

struct SliceGeometry {
    r_lv: f64,
    r_epi: f64,
    infarct: Option<(Sector, f64)>,
    edema: Option<Sector>,
    bias: [f64; 4],
}

/// Generates `n_cases * slices_per_case` records; identical configs give
/// bit-identical datasets.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let s = cfg.size as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(cfg.n_cases * cfg.slices_per_case);
    for case in 0..cfg.n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(case as u64);
        let geo = CaseGeometry {
            cx: s * (0.5 + rng.random_range(-0.04..0.04)),
            cy: s * (0.5 + rng.random_range(-0.04..0.04)),
            r_lv: s * rng.random_range(0.085..0.105),
            thickness: s * rng.random_range(0.045..0.06),
            ecc: rng.random_range(0.0..0.08),
            tilt: rng.random_range(0.0..PI),
            rv_dir: PI + rng.random_range(-0.35..0.35),
            body_a: s * rng.random_range(0.40..0.46),
            body_b: s * rng.random_range(0.32..0.38),
        };
        for slice in 0..cfg.slices_per_case {
            let taper = if cfg.slices_per_case > 1 {
                slice as f64 / (cfg.slices_per_case - 1) as f64
            } else {
                0.0
            };
            let scale = 1.0 - 0.2 * taper + rng.random_range(-0.03..0.03);
            let r_lv = geo.r_lv * scale;
            let r_epi = r_lv + geo.thickness * (1.0 + rng.random_range(-0.05..0.05));
            let center = rng.random_range(0.0..2.0 * PI);
            let (infarct, edema) = if rng.random_bool(cfg.infarct_prob) {
                let hw = rng.random_range(20.0f64..45.0).to_radians();
                let depth = rng.random_range(0.5..1.0);
                let wrap = rng.random_range(15.0f64..35.0).to_radians();
                (
                    Some((Sector { center, half_width: hw }, depth)),
                    Some(Sector {
                        center,
                        half_width: hw + wrap,
                    }),
                )
            } else if rng.random_bool(cfg.edema_only_prob) {
                let hw = rng.random_range(25.0f64..55.0).to_radians();
                (None, Some(Sector { center, half_width: hw }))
            } else {
                (None, None)
            };
            let bias = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..1.5),
            ];
            let sg = SliceGeometry {
                r_lv,
                r_epi,
                infarct,
                edema,
                bias,
            };
            records.push(render(cfg, &geo, &sg, case, slice, &noise, &mut rng));
        }
    }
    Dataset::new(cfg.size, records)
}

fn render(
    cfg: &PhantomConfig,
    geo: &CaseGeometry,
    sg: &SliceGeometry,
    case: usize,
    slice: usize,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> SliceRecord {
    let n = cfg.size;
    let s = n as f64;
    let (sin_t, cos_t) = geo.tilt.sin_cos();
    let rv_offset = 0.9 * sg.r_epi;
    let (rvx, rvy) = (geo.cx + rv_offset * geo.rv_dir.cos(), geo.cy + rv_offset * geo.rv_dir.sin());
    let r_rv = 1.25 * sg.r_epi;
    let septum = sg.r_epi + 0.01 * s;

    let mut y_ana = vec![ana::BACKGROUND; n * n];
    let mut y_pat = vec![0u8; n * n];
    let mut images = [vec![0f32; n * n], vec![0f32; n * n], vec![0f32; n * n]];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let (dx, dy) = (x - geo.cx, y - geo.cy);
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let rho = ((u / (1.0 + geo.ecc)).powi(2) + (v / (1.0 - geo.ecc)).powi(2)).sqrt();
            let angle = dy.atan2(dx);
            let in_body = (dx / geo.body_a).powi(2) + (dy / geo.body_b).powi(2) <= 1.0;
            let d_rv = ((x - rvx).powi(2) + (y - rvy).powi(2)).sqrt();

            let mut tissue = if in_body { &BODY } else { &AIR };
            let idx = row * n + col;
            if rho < sg.r_lv {
                y_ana[idx] = ana::LV;
                tissue = &BLOOD;
            } else if rho < sg.r_epi {
                y_ana[idx] = ana::MYO;
                tissue = &MYO;
                let depth = (rho - sg.r_lv) / (sg.r_epi - sg.r_lv);
                let infarct = sg
                    .infarct
                    .is_some_and(|(sector, d)| sector.contains(angle) && depth <= d);
                if infarct {
                    y_pat[idx] = pat::INFARCT;
                    tissue = &INFARCT;
                } else if sg.edema.is_some_and(|e| e.contains(angle)) {
                    y_pat[idx] = pat::EDEMA;
                    tissue = &EDEMA;
                }
            } else if d_rv < r_rv && rho >= septum {
                y_ana[idx] = ana::RV;
                tissue = &BLOOD;
            }

            let [bx, by, phase, freq] = sg.bias;
            let (nx, ny) = (x / s - 0.5, y / s - 0.5);
            let field = 1.0 + cfg.bias_strength * (bx * nx + by * ny + 0.5 * (2.0 * PI * freq * (nx + ny) + phase).sin());
            for (img, &base) in images.iter_mut().zip(&tissue.0) {
                let value = base * field + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                img[idx] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let [x_lge, x_t2, x_bssfp] = images;
    SliceRecord {
        case_id: format!("case{case:03}"),
        slice_id: format!("s{slice:02}"),
        height: n,
        width: n,
        x_lge,
        x_t2,
        x_bssfp,
        y_ana,
        y_pat,
    }
}
