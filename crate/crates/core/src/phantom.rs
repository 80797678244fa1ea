//! Procedural CT-like phantoms with exactly annotated nodules.
//!
//! The body is a rounded-rectangle cylinder: air outside, a soft-tissue wall, and
//! lung parenchyma with faint texture and a few vessel-like tubes. Nodules
//! are Gaussian blobs whose half-amplitude contour has the annotated
//! diameter; the annotation box is the set of voxels inside that contour.

use crate::dataset::{classify_size, AttenuationClass, NoduleAnnotation, SizeClass};
use crate::volume::{hu_to_normalized, Box3, Volume, DEFAULT_HU_WINDOW};
use crate::{Error, Result};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const AIR_HU: f64 = -1000.0;
const LUNG_HU: f64 = -850.0;
const WALL_HU: f64 = 40.0;
const VESSEL_PEAK_HU: f64 = -250.0;
const TEXTURE_HU: f64 = 4.0;
const WALL_THICKNESS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// `(z, y, x)` voxels.
    pub shape: [usize; 3],
    /// `(dz, dy, dx)` millimetres.
    pub spacing: [f64; 3],
    pub n_nodules: usize,
    /// Relative weights of small, medium, large.
    pub size_mix: [f64; 3],
    /// Relative weights of solid, part-solid, GGN.
    pub attenuation_mix: [f64; 3],
    pub n_vessels: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 96],
            spacing: [1.0, 0.8, 0.8],
            n_nodules: 3,
            size_mix: [1.0; 3],
            attenuation_mix: [1.0; 3],
            n_vessels: 6,
        }
    }
}

/// Peak HU of a nodule of each attenuation class.
pub fn peak_hu(class: AttenuationClass) -> f64 {
    match class {
        AttenuationClass::Solid => 40.0,
        AttenuationClass::PartSolid => -300.0,
        AttenuationClass::Ggn => -600.0,
    }
}

/// Normalised lung background level.
pub fn lung_level() -> f32 {
    hu_to_normalized(LUNG_HU, DEFAULT_HU_WINDOW)
}

fn hu_amplitude(hu: f64) -> f64 {
    hu * 2.0 / (DEFAULT_HU_WINDOW.1 - DEFAULT_HU_WINDOW.0)
}

/// Normalised blob amplitude (peak minus lung level).
pub fn nodule_amplitude(class: AttenuationClass) -> f64 {
    hu_amplitude(peak_hu(class) - LUNG_HU)
}

fn diameter_range(size: SizeClass) -> (f64, f64) {
    match size {
        SizeClass::Small => (5.0, 10.0),
        SizeClass::Medium => (10.5, 19.5),
        SizeClass::Large => (21.0, 24.0),
    }
}

/// Voxels whose centres lie within `radius_mm` of `center` along each axis.
pub fn blob_box(center: [f64; 3], diameter_mm: f64, spacing: [f64; 3]) -> Result<Box3> {
    let r = [0, 1, 2].map(|a| diameter_mm / 2.0 / spacing[a]);
    Box3::new(
        [0, 1, 2].map(|a| (center[a] - r[a]).ceil() as i64),
        [0, 1, 2].map(|a| (center[a] + r[a]).floor() as i64 + 1),
    )
}

struct Nodule {
    center: [f64; 3],
    diameter_mm: f64,
    attenuation: AttenuationClass,
    bbox: Box3,
}

pub fn generate_phantom(scan_id: &str, seed: u64, config: &PhantomConfig) -> Result<(Volume, Vec<NoduleAnnotation>)> {
    let [d, h, w] = config.shape;
    if config.shape.iter().any(|&n| n < 16) {
        return Err(Error::InvalidArgument(format!("phantom shape {:?} too small", config.shape)));
    }
    let spacing = config.spacing;
    let mut bg_rng = ChaCha8Rng::seed_from_u64(seed);
    bg_rng.set_stream(1);
    let mut nod_rng = ChaCha8Rng::seed_from_u64(seed);
    nod_rng.set_stream(2);

    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (oy, ox) = (h as f64 / 2.0 - 1.5, w as f64 / 2.0 - 1.5);
    let (iy, ix) = (oy - WALL_THICKNESS, ox - WALL_THICKNESS);
    // rounded-rectangle cross-section (superellipse of order 4)
    let in_ellipse = |y: f64, x: f64, ay: f64, ax: f64| ((y - cy) / ay).powi(4) + ((x - cx) / ax).powi(4) <= 1.0;

    let nodules = place_nodules(config, &mut nod_rng, &|y, x| in_ellipse(y, x, iy - 3.0, ix - 3.0))?;

    // low-frequency texture
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|_| bg_rng.random_range(-0.25..0.25));
            (k, bg_rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let vessels = vessel_field(config, &mut bg_rng, &|y, x| in_ellipse(y, x, iy, ix));

    let window = DEFAULT_HU_WINDOW;
    let air = hu_to_normalized(AIR_HU, window);
    let wall = hu_to_normalized(WALL_HU, window);
    let lung = lung_level() as f64;
    let texture_amp = hu_amplitude(TEXTURE_HU);
    let vessel_amp = hu_amplitude(VESSEL_PEAK_HU - LUNG_HU);
    let exclusion: Vec<Box3> = nodules
        .iter()
        .map(|n| grow(&n.bbox, exclusion_margin(n.diameter_mm, spacing)))
        .collect();

    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64, x as f64);
                let i = (z * h + y) * w + x;
                data[i] = if !in_ellipse(fy, fx, oy, ox) {
                    air
                } else if !in_ellipse(fy, fx, iy, ix) {
                    wall
                } else {
                    let t: f64 = waves
                        .iter()
                        .map(|(k, phase)| (k[0] * z as f64 + k[1] * fy + k[2] * fx + phase).cos())
                        .sum::<f64>()
                        * texture_amp
                        / 4.0;
                    let p = [z as i64, y as i64, x as i64];
                    let v = if exclusion.iter().any(|b| b.contains_point(p)) { 0.0 } else { vessels[i] as f64 };
                    (lung + t + vessel_amp * v) as f32
                };
            }
        }
    }
    for n in &nodules {
        add_blob(&mut data, config, n);
    }
    data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));

    let volume = Volume::new(scan_id, config.shape, spacing, data)?
        .with_intensity_range(-1.0, 1.0)
        .with_background(air);
    let annotations = nodules
        .iter()
        .map(|n| NoduleAnnotation::new(scan_id, n.bbox, n.diameter_mm, n.attenuation))
        .collect::<Result<Vec<_>>>()?;
    Ok((volume, annotations))
}

/// Blob profile support: Gaussian up to `TAPER_START·D`, cosine taper to
/// zero at `TAPER_END·D` from the centre.
const TAPER_START: f64 = 0.6;
const TAPER_END: f64 = 0.85;

/// Per-axis voxels beyond the box that the blob's support can reach.
fn exclusion_margin(diameter_mm: f64, spacing: [f64; 3]) -> [i64; 3] {
    spacing.map(|s| ((TAPER_END - 0.5) * diameter_mm / s).ceil() as i64 + 1)
}

fn grow(b: &Box3, m: [i64; 3]) -> Box3 {
    Box3 {
        min: [0, 1, 2].map(|a| b.min[a] - m[a]),
        max: [0, 1, 2].map(|a| b.max[a] + m[a]),
    }
}

fn place_nodules(
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
    in_lung: &dyn Fn(f64, f64) -> bool,
) -> Result<Vec<Nodule>> {
    let sizes = WeightedIndex::new(config.size_mix)
        .map_err(|e| Error::InvalidArgument(format!("size mix: {e}")))?;
    let atts = WeightedIndex::new(config.attenuation_mix)
        .map_err(|e| Error::InvalidArgument(format!("attenuation mix: {e}")))?;
    let specs: Vec<(SizeClass, AttenuationClass, f64)> = (0..config.n_nodules)
        .map(|_| {
            let size = SizeClass::ALL[sizes.sample(rng)];
            let attenuation = AttenuationClass::ALL[atts.sample(rng)];
            let (lo, hi) = diameter_range(size);
            (size, attenuation, rng.random_range(lo..=hi))
        })
        .collect();
    // largest first, with whole-layout restarts
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| specs[b].2.total_cmp(&specs[a].2).then(a.cmp(&b)));
    const RESTARTS: usize = 20;
    const TRIES: usize = 500;
    for _ in 0..RESTARTS {
        let mut placed: Vec<Option<Nodule>> = (0..specs.len()).map(|_| None).collect();
        let mut ok = true;
        for &k in &order {
            let (size, attenuation, diameter_mm) = specs[k];
            debug_assert_eq!(classify_size(diameter_mm)?, size);
            let mut found = None;
            for _ in 0..TRIES {
                let center = [0, 1, 2].map(|a| rng.random_range(0.0..config.shape[a] as f64 - 1.0));
                let bbox = blob_box(center, diameter_mm, config.spacing)?;
                let (y0, y1, x0, x1) = (bbox.min[1], bbox.max[1] - 1, bbox.min[2], bbox.max[2] - 1);
                let inside = bbox.min[0] >= 2
                    && bbox.max[0] <= config.shape[0] as i64 - 2
                    && [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                        .iter()
                        .all(|&(y, x)| in_lung(y as f64, x as f64));
                if !inside {
                    continue;
                }
                // neither blob's support may reach the other's box
                let margin = exclusion_margin(diameter_mm, config.spacing);
                let clear = placed.iter().flatten().all(|o| {
                    let other = exclusion_margin(o.diameter_mm, config.spacing);
                    let m = [0, 1, 2].map(|a| margin[a].max(other[a]));
                    grow(&bbox, m).intersection(&o.bbox).is_none()
                });
                if clear {
                    found = Some(Nodule {
                        center,
                        diameter_mm,
                        attenuation,
                        bbox,
                    });
                    break;
                }
            }
            match found {
                Some(n) => placed[k] = Some(n),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(placed.into_iter().flatten().collect());
        }
    }
    Err(Error::Capacity(format!(
        "could not place {} nodules in a {:?} phantom",
        config.n_nodules, config.shape
    )))
}

/// Tube field in `[0, 1]` along smooth random walks inside the lung.
fn vessel_field(config: &PhantomConfig, rng: &mut ChaCha8Rng, in_lung: &dyn Fn(f64, f64) -> bool) -> Vec<f32> {
    let [d, h, w] = config.shape;
    let mut field = vec![0.0f32; d * h * w];
    for _ in 0..config.n_vessels {
        let radius_mm: f64 = rng.random_range(0.8..1.4);
        let mut p = [
            rng.random_range(0.0..d as f64),
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        ];
        let mut dir = unit([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let steps = rng.random_range(40..90);
        for _ in 0..steps {
            let jitter = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
            dir = unit([dir[0] + jitter[0], dir[1] + jitter[1], dir[2] + jitter[2]]);
            p = [p[0] + dir[0], p[1] + dir[1], p[2] + dir[2]];
            if p[0] < 0.0 || p[0] > (d - 1) as f64 || !in_lung(p[1], p[2]) {
                break;
            }
            stamp_tube(&mut field, config, p, radius_mm);
        }
    }
    field
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    v.map(|c| c / n)
}

fn stamp_tube(field: &mut [f32], config: &PhantomConfig, p: [f64; 3], radius_mm: f64) {
    let [d, h, w] = config.shape;
    let reach = [0, 1, 2].map(|a| (2.5 * radius_mm / config.spacing[a]).ceil() as i64);
    let s2 = 2.0 * radius_mm * radius_mm;
    for z in (p[0] as i64 - reach[0]).max(0)..=(p[0] as i64 + reach[0]).min(d as i64 - 1) {
        for y in (p[1] as i64 - reach[1]).max(0)..=(p[1] as i64 + reach[1]).min(h as i64 - 1) {
            for x in (p[2] as i64 - reach[2]).max(0)..=(p[2] as i64 + reach[2]).min(w as i64 - 1) {
                let r2 = ((z as f64 - p[0]) * config.spacing[0]).powi(2)
                    + ((y as f64 - p[1]) * config.spacing[1]).powi(2)
                    + ((x as f64 - p[2]) * config.spacing[2]).powi(2);
                let v = (-r2 / s2).exp() as f32;
                let i = (z as usize * h + y as usize) * w + x as usize;
                if v > field[i] {
                    field[i] = v;
                }
            }
        }
    }
}

fn add_blob(data: &mut [f32], config: &PhantomConfig, n: &Nodule) {
    let [d, h, w] = config.shape;
    let amp = nodule_amplitude(n.attenuation);
    let sigma = n.diameter_mm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let reach_mm = TAPER_END * n.diameter_mm;
    let (t0, t1) = (TAPER_START * n.diameter_mm, reach_mm);
    let lo = [0, 1, 2].map(|a| ((n.center[a] - reach_mm / config.spacing[a]).floor() as i64).max(0));
    let hi = [0, 1, 2].map(|a| ((n.center[a] + reach_mm / config.spacing[a]).ceil() as i64).min(config.shape[a] as i64 - 1));
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let r2 = ((z as f64 - n.center[0]) * config.spacing[0]).powi(2)
                    + ((y as f64 - n.center[1]) * config.spacing[1]).powi(2)
                    + ((x as f64 - n.center[2]) * config.spacing[2]).powi(2);
                let r = r2.sqrt();
                if r >= t1 {
                    continue;
                }
                let taper = if r <= t0 {
                    1.0
                } else {
                    (0.5 * std::f64::consts::PI * (r - t0) / (t1 - t0)).cos().powi(2)
                };
                let i = (z as usize * h + y as usize) * w + x as usize;
                debug_assert!(i < d * h * w);
                data[i] += (amp * taper * (-r2 / (2.0 * sigma * sigma)).exp()) as f32;
            }
        }
    }
}
