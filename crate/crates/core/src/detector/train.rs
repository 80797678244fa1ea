//! Detector training schedule, augmentation and checkpoints.

use super::{
    assign_targets, detector_loss, generate_anchors, infer, pack_head_grads, sample_anchors, unpack_heads,
    DetectorConfig, DetectorNet, LossBreakdown, STRIDE,
};
use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::evaluation::{operating_point, DEFAULT_MATCH_IOU};
use crate::nn::{Parameterized, Sgd, Tensor};
use crate::training::config_hash;
use crate::volume::{resample_region, Box3, Volume};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const DETECTOR_FORMAT_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "detector.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorManifest {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: DetectorConfig,
    pub seed: u64,
    pub step: usize,
    pub val_sensitivity: Option<f64>,
    pub val_fp_per_scan: Option<f64>,
    pub weights_values: usize,
    pub weights_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorCheckpoint {
    pub manifest: DetectorManifest,
    pub weights: Vec<f32>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl DetectorCheckpoint {
    fn capture(net: &DetectorNet<f32>, config: &DetectorConfig, seed: u64, step: usize) -> Result<Self> {
        let weights = net.export_state();
        Ok(Self {
            manifest: DetectorManifest {
                format_version: DETECTOR_FORMAT_VERSION,
                kind: "detector".into(),
                config_hash: config_hash(config)?,
                config: config.clone(),
                seed,
                step,
                val_sensitivity: None,
                val_fp_per_scan: None,
                weights_values: weights.len(),
                weights_sha256: hex::encode(Sha256::digest(f32_bytes(&weights))),
            },
            weights,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = dir.join(WEIGHTS_FILE);
        std::fs::write(&w, f32_bytes(&self.weights)).map_err(|e| Error::io(&w, e))?;
        let m = dir.join("MANIFEST.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&m, text).map_err(|e| Error::io(&m, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join("MANIFEST.json");
        let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let manifest: DetectorManifest = serde_json::from_str(&text).map_err(|e| Error::format(&m, e.to_string()))?;
        if manifest.kind != "detector" || manifest.format_version != DETECTOR_FORMAT_VERSION {
            return Err(Error::format(&m, "not a detector checkpoint of a supported version"));
        }
        let w = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&w).map_err(|e| Error::io(&w, e))?;
        if bytes.len() != 4 * manifest.weights_values || hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
            return Err(Error::Consistency(format!("{} does not match its manifest digest", w.display())));
        }
        let weights = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { manifest, weights })
    }
}

pub enum DetectorEvent<'a> {
    Step { step: usize, lr: f64, loss: &'a LossBreakdown },
    LrDrop { step: usize, from: f64, to: f64 },
    Validation { step: usize, sensitivity: f64, fp_per_scan: f64 },
}

pub struct DetectorOutcome {
    pub checkpoint: DetectorCheckpoint,
    pub losses: Vec<(usize, LossBreakdown)>,
}

/// Entry indices for `count` draws: concatenated seeded permutations.
pub fn training_order(n_entries: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut perm: Vec<usize> = (0..n_entries).collect();
    while out.len() < count && n_entries > 0 {
        perm.shuffle(rng);
        out.extend(perm.iter().take(count - out.len()));
    }
    out
}

struct TrainScan {
    volume: Volume,
    gts: Vec<Box3>,
}

/// Random shift and zoom of the whole scan onto the training crop.
fn augmented_crop(scan: &TrainScan, config: &DetectorConfig, rng: &mut impl Rng) -> (Vec<f32>, Vec<Box3>) {
    let shape = scan.volume.shape();
    let crop = config.input_shape;
    let zoom = 1.0 + rng.random_range(-config.augment_zoom..=config.augment_zoom);
    let mut min = [0i64; 3];
    let mut max = [0i64; 3];
    for a in 0..3 {
        let extent = ((crop[a] as f64 / zoom).round() as i64).max(1);
        let shift = rng.random_range(-config.augment_shift..=config.augment_shift) * crop[a] as f64;
        let center = shape[a] as f64 / 2.0 + shift;
        min[a] = (center - extent as f64 / 2.0).round() as i64;
        max[a] = min[a] + extent;
    }
    let region = Box3 { min, max };
    let data = resample_region(&scan.volume, &region, crop);
    let bounds = Box3::from_shape(crop);
    let scale = [0, 1, 2].map(|a| crop[a] as f64 / region.extent()[a] as f64);
    let gts = scan
        .gts
        .iter()
        .filter_map(|g| {
            let lo = [0, 1, 2].map(|a| ((g.min[a] - region.min[a]) as f64 * scale[a]).round() as i64);
            let hi = [0, 1, 2].map(|a| ((g.max[a] - region.min[a]) as f64 * scale[a]).round() as i64);
            Box3::new(lo, [0, 1, 2].map(|a| hi[a].max(lo[a] + 1))).ok()?.clip_to(&bounds)
        })
        .collect();
    (data, gts)
}

fn load_split(
    entries: &[&ManifestEntry],
    load: &mut impl FnMut(&ManifestEntry) -> Result<Volume>,
) -> Result<Vec<TrainScan>> {
    entries
        .iter()
        .map(|e| {
            Ok(TrainScan {
                volume: load(e)?,
                gts: e.nodules.iter().map(|n| n.bbox).collect(),
            })
        })
        .collect()
}

fn validate(net: &mut DetectorNet<f32>, scans: &[TrainScan], config: &DetectorConfig) -> Result<Option<(f64, f64)>> {
    let gts: BTreeMap<String, Vec<Box3>> = scans.iter().map(|s| (s.volume.scan_id.clone(), s.gts.clone())).collect();
    if gts.values().all(Vec::is_empty) {
        return Ok(None);
    }
    let mut dets = Vec::new();
    for s in scans {
        dets.extend(infer(net, &s.volume, config)?);
    }
    operating_point(&dets, &gts, DEFAULT_MATCH_IOU).map(Some)
}

/// SGD with momentum on shift/zoom-augmented training scans (real and
/// synthetic alike). The returned weights are those with the best validation
/// sensitivity (fewer FPs per scan breaking ties) among the validation
/// points inside the selection window, or the final weights when the
/// manifest has no validation nodules.
pub fn train_detector(
    manifest: &DatasetManifest,
    config: &DetectorConfig,
    seed: u64,
    mut load: impl FnMut(&ManifestEntry) -> Result<Volume>,
    on_event: &mut dyn FnMut(DetectorEvent<'_>) -> Result<()>,
) -> Result<DetectorOutcome> {
    config.validate()?;
    let train_entries = manifest.with_split(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::Configuration("manifest has no training entries".into()));
    }
    let val_entries = manifest.with_split(Split::Val);
    let train = load_split(&train_entries, &mut load)?;
    let val = load_split(&val_entries, &mut load)?;
    if let Some(s) = train.iter().find(|s| s.volume.shape().iter().any(|&d| d < STRIDE)) {
        return Err(Error::InvalidArgument(format!("scan '{}' is below the minimum input", s.volume.scan_id)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DetectorNet::<f32>::new(config, &mut rng)?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let order = training_order(train.len(), config.total_steps * config.batch_size, &mut rng);
    let crop = config.input_shape;
    let grid = DetectorNet::<f32>::grid(crop);
    let anchors = generate_anchors(config, grid, crop);
    let mut losses = Vec::with_capacity(config.total_steps);
    let mut best: Option<(f64, f64, DetectorCheckpoint)> = None;

    for step in 0..config.total_steps {
        if step == config.lr_drop_step && step > 0 {
            on_event(DetectorEvent::LrDrop {
                step,
                from: opt.lr,
                to: config.lr_after_drop,
            })?;
            opt.lr = config.lr_after_drop;
        }
        let b = config.batch_size;
        let mut x = Vec::with_capacity(b * crop.iter().product::<usize>());
        let mut batch_gts = Vec::with_capacity(b);
        for k in 0..b {
            let (data, gts) = augmented_crop(&train[order[step * b + k]], config, &mut rng);
            x.extend(data);
            batch_gts.push(gts);
        }
        let x = Tensor::from_vec([b, 1, crop[0], crop[1], crop[2]], x);
        let trace = net.forward(&x, true)?;
        let mut d_cls = Tensor::zeros(trace.cls.shape());
        let mut d_reg = Tensor::zeros(trace.reg.shape());
        let mut total = LossBreakdown::default();
        for (k, gts) in batch_gts.iter().enumerate() {
            let (logits, deltas) = unpack_heads(&trace, k, net.n_anchors);
            let targets = assign_targets(&anchors, gts, config);
            let sampled = sample_anchors(&targets, &logits, config, &mut rng);
            let (l, mut dl, mut dd) = detector_loss(&logits, &deltas, &targets, &sampled, config.regression_weight);
            dl.iter_mut().for_each(|g| *g /= b as f64);
            dd.iter_mut().flatten().for_each(|g| *g /= b as f64);
            pack_head_grads(&mut d_cls, &mut d_reg, k, net.n_anchors, &dl, &dd);
            total.classification += l.classification / b as f64;
            total.regression += l.regression / b as f64;
            total.total += l.total / b as f64;
            total.n_positive += l.n_positive;
            total.n_negative += l.n_negative;
        }
        if !total.total.is_finite() {
            return Err(Error::NonFinite(format!("detector loss at step {step}: {}", total.total)));
        }
        net.zero_grad();
        net.backward(&trace, &d_cls, &d_reg);
        opt.step(&mut net.params_mut());
        on_event(DetectorEvent::Step {
            step,
            lr: opt.lr,
            loss: &total,
        })?;
        losses.push((step, total));

        let done = step + 1;
        let in_window = done >= config.select_window[0] && done <= config.select_window[1];
        let due = config.validate_every > 0 && done % config.validate_every == 0 || done == config.total_steps;
        if in_window && due && !val.is_empty() {
            if let Some((sens, fp)) = validate(&mut net, &val, config)? {
                on_event(DetectorEvent::Validation {
                    step: done,
                    sensitivity: sens,
                    fp_per_scan: fp,
                })?;
                let better = match &best {
                    None => true,
                    Some((bs, bf, _)) => sens > *bs || (sens == *bs && fp < *bf),
                };
                if better {
                    let mut ck = DetectorCheckpoint::capture(&net, config, seed, done)?;
                    ck.manifest.val_sensitivity = Some(sens);
                    ck.manifest.val_fp_per_scan = Some(fp);
                    best = Some((sens, fp, ck));
                }
            }
        }
    }
    let checkpoint = match best {
        Some((_, _, ck)) => ck,
        None => DetectorCheckpoint::capture(&net, config, seed, config.total_steps)?,
    };
    Ok(DetectorOutcome { checkpoint, losses })
}
