//! Single-stage anchor-based 3D region-proposal detector.

mod model;
mod train;

pub use model::{DetectorNet, DetectorTrace, STRIDE};
pub use train::{
    train_detector, training_order, DetectorCheckpoint, DetectorEvent, DetectorManifest, DetectorOutcome,
};

use crate::evaluation::score_order;
use crate::nn::{sigmoid, Parameterized, Tensor};
use crate::volume::{iou, Box3, Volume};
use crate::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Training crop, `[z, y, x]` voxels.
    pub input_shape: [usize; 3],
    pub base_width: usize,
    /// 3×3×3 blocks after each stride-2 stage.
    pub blocks_per_stage: usize,
    /// Cube anchor sides in voxels, ascending.
    pub anchor_sides: Vec<usize>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub detection_threshold: f64,
    /// Anchors per scan per loss evaluation.
    pub sample_size: usize,
    /// Upper bound on the positive share of a sample.
    pub positive_fraction: f64,
    /// Candidates kept before NMS.
    pub pre_nms_top_k: usize,
    /// Factor on the regression term of the loss.
    pub regression_weight: f64,

    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_drop_step: usize,
    pub lr_after_drop: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Maximum shift per axis as a fraction of the crop.
    pub augment_shift: f64,
    /// Maximum relative zoom.
    pub augment_zoom: f64,
    /// Steps `[start, end]` (inclusive) whose checkpoints compete on validation sensitivity.
    pub select_window: [usize; 2],
    pub validate_every: usize,
}

impl DetectorConfig {
    pub fn paper() -> Self {
        Self {
            input_shape: [160, 176, 224],
            base_width: 24,
            blocks_per_stage: 2,
            anchor_sides: vec![8, 16, 32],
            pos_iou: 0.5,
            neg_iou: 0.1,
            nms_iou: 0.1,
            detection_threshold: 0.5,
            sample_size: 128,
            positive_fraction: 0.5,
            pre_nms_top_k: 1000,
            regression_weight: 1.0,
            total_steps: 40_000,
            batch_size: 2,
            learning_rate: 1.0e-3,
            lr_drop_step: 20_000,
            lr_after_drop: 1.0e-4,
            momentum: 0.9,
            weight_decay: 1.0e-4,
            augment_shift: 0.15,
            augment_zoom: 0.15,
            select_window: [30_000, 40_000],
            validate_every: 1000,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_shape: [64, 64, 96],
            base_width: 8,
            blocks_per_stage: 1,
            sample_size: 64,
            pre_nms_top_k: 200,
            regression_weight: 0.25,
            total_steps: 500,
            learning_rate: 1.0e-2,
            lr_drop_step: 400,
            lr_after_drop: 1.0e-3,
            select_window: [300, 500],
            validate_every: 50,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.anchor_sides.is_empty() || self.anchor_sides.iter().any(|&s| s == 0) {
            return bad("anchor sides must be positive".into());
        }
        if self.anchor_sides.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("anchor sides {:?} must be strictly ascending", self.anchor_sides));
        }
        if !(self.regression_weight >= 0.0 && self.regression_weight.is_finite()) {
            return bad(format!("regression weight {} must be finite and non-negative", self.regression_weight));
        }
        for (name, v) in [
            ("pos_iou", self.pos_iou),
            ("neg_iou", self.neg_iou),
            ("nms_iou", self.nms_iou),
            ("detection_threshold", self.detection_threshold),
            ("positive_fraction", self.positive_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.neg_iou > self.pos_iou {
            return bad("neg_iou must not exceed pos_iou".into());
        }
        if self.input_shape.iter().any(|&d| d < STRIDE) {
            return bad(format!("input shape {:?} is below the stride {STRIDE}", self.input_shape));
        }
        if self.base_width == 0 || self.batch_size == 0 || self.total_steps == 0 || self.sample_size == 0 {
            return bad("widths, batch size, step count and sample size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.augment_shift) || !(0.0..1.0).contains(&self.augment_zoom) {
            return bad("augmentation ranges must be in [0, 1)".into());
        }
        if self.select_window[0] > self.select_window[1] {
            return bad("select_window start exceeds its end".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scan_id: String,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
}

pub const DETECTIONS_CSV_HEADER: &str = "scan_id,z0,y0,x0,z1,y1,x1,score";

pub fn detections_csv(dets: &[Detection]) -> String {
    let mut s = String::from(DETECTIONS_CSV_HEADER);
    s.push('\n');
    for d in dets {
        let [z0, y0, x0, z1, y1, x1] = d.bbox.to_array();
        let _ = writeln!(s, "{},{z0},{y0},{x0},{z1},{y1},{x1},{}", d.scan_id, d.score);
    }
    s
}

pub fn parse_detections_csv(text: &str, origin: &Path) -> Result<Vec<Detection>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DETECTIONS_CSV_HEADER => {}
        _ => return Err(Error::format(origin, format!("expected header '{DETECTIONS_CSV_HEADER}'"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = || Error::format(origin, format!("line {}: malformed detection '{line}'", n + 2));
        if f.len() != 8 {
            return Err(err());
        }
        let mut c = [0i64; 6];
        for i in 0..6 {
            c[i] = f[i + 1].parse().map_err(|_| err())?;
        }
        let score: f64 = f[7].parse().map_err(|_| err())?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err());
        }
        out.push(Detection {
            scan_id: f[0].to_string(),
            bbox: Box3::from_array(c).map_err(|_| err())?,
            score,
        });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_csv(&text, path)
}

// ---------------------------------------------------------------------------
// anchors and targets
// ---------------------------------------------------------------------------

/// Anchor `cell · A + a` is the cube of side `anchor_sides[a]` centred on
/// feature cell `cell` (z-major), clipped to the volume.
pub fn generate_anchors(config: &DetectorConfig, grid: [usize; 3], volume_shape: [usize; 3]) -> Vec<Box3> {
    let bounds = Box3::from_shape(volume_shape);
    let half = (STRIDE / 2) as i64;
    let mut out = Vec::with_capacity(grid.iter().product::<usize>() * config.anchor_sides.len());
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let c = [z, y, x].map(|v| (v * STRIDE) as i64 + half);
                for &side in &config.anchor_sides {
                    let b = Box3::centered_cube(c, side);
                    out.push(b.clip_to(&bounds).unwrap_or(b));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<usize>>,
    /// Centre offsets over anchor extent, then log extent ratios; zero unless positive.
    pub deltas: Vec<[f64; 6]>,
}

/// Scale applied to centre offsets and log-size ratios in delta space.
pub const DELTA_WEIGHTS: [f64; 2] = [10.0, 5.0];

pub fn encode_deltas(anchor: &Box3, gt: &Box3) -> [f64; 6] {
    let (ac, gc) = (anchor.center(), gt.center());
    let (ae, ge) = (anchor.extent(), gt.extent());
    let mut d = [0.0; 6];
    for a in 0..3 {
        d[a] = DELTA_WEIGHTS[0] * (gc[a] - ac[a]) / ae[a] as f64;
        d[3 + a] = DELTA_WEIGHTS[1] * (ge[a] as f64 / ae[a] as f64).ln();
    }
    d
}

/// Inverse of [`encode_deltas`], rounded to the voxel grid (extent ≥ 1).
pub fn decode_deltas(anchor: &Box3, d: &[f64; 6]) -> Box3 {
    let (ac, ae) = (anchor.center(), anchor.extent());
    let mut min = [0i64; 3];
    let mut max = [0i64; 3];
    for a in 0..3 {
        let c = ac[a] + d[a] / DELTA_WEIGHTS[0] * ae[a] as f64;
        let e = ae[a] as f64 * (d[3 + a] / DELTA_WEIGHTS[1]).clamp(-4.0, 4.0).exp();
        min[a] = (c - e / 2.0).round() as i64;
        max[a] = ((c + e / 2.0).round() as i64).max(min[a] + 1);
    }
    Box3 { min, max }
}

/// Positive at IoU ≥ `pos_iou` or as a ground truth's best anchor, negative
/// below `neg_iou`, otherwise ignored.
pub fn assign_targets(anchors: &[Box3], gts: &[Box3], config: &DetectorConfig) -> Targets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut deltas = vec![[0.0; 6]; n];
    if gts.is_empty() {
        return Targets { labels, matched_gt, deltas };
    }
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut best_gt: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut ious = vec![0.0; gts.len()];
    let mut table = Vec::with_capacity(n * gts.len());
    for a in anchors {
        for (g, gt) in gts.iter().enumerate() {
            ious[g] = iou(a, gt);
            best_for_gt[g] = best_for_gt[g].max(ious[g]);
        }
        let (g, v) = ious
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (g, v)| if v > b.1 { (g, v) } else { b });
        best_gt.push((g, v));
        table.extend_from_slice(&ious);
    }
    for i in 0..n {
        let (g, v) = best_gt[i];
        if v >= config.pos_iou {
            labels[i] = AnchorLabel::Positive;
            matched_gt[i] = Some(g);
        } else if v >= config.neg_iou {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    for (g, &best) in best_for_gt.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for i in 0..n {
            if table[i * gts.len() + g] == best && matched_gt[i].is_none() {
                labels[i] = AnchorLabel::Positive;
                matched_gt[i] = Some(g);
            }
        }
    }
    for i in 0..n {
        if let Some(g) = matched_gt[i] {
            deltas[i] = encode_deltas(&anchors[i], &gts[g]);
        }
    }
    Targets { labels, matched_gt, deltas }
}

/// Anchors entering the loss: positives up to the positive share, the rest
/// negatives, half of them the highest-scoring ones and half drawn at random.
pub fn sample_anchors(targets: &Targets, logits: &[f64], config: &DetectorConfig, rng: &mut impl Rng) -> Vec<usize> {
    let pos: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == AnchorLabel::Positive)
        .collect();
    let neg: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == AnchorLabel::Negative)
        .collect();
    let max_pos = ((config.sample_size as f64 * config.positive_fraction).round() as usize).max(1);
    let mut out: Vec<usize> = if pos.len() > max_pos {
        sample(rng, pos.len(), max_pos).into_iter().map(|k| pos[k]).collect()
    } else {
        pos
    };
    let n_neg = config.sample_size.saturating_sub(out.len()).min(neg.len());
    let n_hard = n_neg / 2;
    let mut by_score = neg.clone();
    by_score.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let hard: Vec<usize> = by_score[..n_hard].to_vec();
    let rest: Vec<usize> = by_score[n_hard..].to_vec();
    out.extend(&hard);
    out.extend(sample(rng, rest.len(), n_neg - n_hard).into_iter().map(|k| rest[k]));
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Mean binary cross-entropy over the sampled anchors plus smooth-L1 over
/// their positives (summed across the six deltas, averaged over
/// positives), weighted 1:1. Returns the loss with its gradients
/// with respect to every logit and delta (zero outside the sample).
pub fn detector_loss(
    logits: &[f64],
    reg: &[[f64; 6]],
    targets: &Targets,
    sampled: &[usize],
    regression_weight: f64,
) -> (LossBreakdown, Vec<f64>, Vec<[f64; 6]>) {
    let mut d_logits = vec![0.0; logits.len()];
    let mut d_reg = vec![[0.0; 6]; reg.len()];
    if sampled.is_empty() {
        log::warn!("no anchors sampled; detector loss is zero");
        return (LossBreakdown::default(), d_logits, d_reg);
    }
    let n = sampled.len() as f64;
    let n_pos = sampled
        .iter()
        .filter(|&&i| targets.labels[i] == AnchorLabel::Positive)
        .count();
    let mut cls = 0.0;
    let mut regl = 0.0;
    for &i in sampled {
        let y = if targets.labels[i] == AnchorLabel::Positive { 1.0 } else { 0.0 };
        let x = logits[i];
        // log(1 + e^x) - y·x, stable
        cls += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        d_logits[i] = (sigmoid(x) - y) / n;
        if y == 1.0 {
            for k in 0..6 {
                let (l, g) = smooth_l1(reg[i][k] - targets.deltas[i][k]);
                regl += l;
                d_reg[i][k] = regression_weight * g / n_pos as f64;
            }
        }
    }
    cls /= n;
    if n_pos > 0 {
        regl /= n_pos as f64;
    }
    (
        LossBreakdown {
            classification: cls,
            regression: regl,
            total: cls + regression_weight * regl,
            n_positive: n_pos,
            n_negative: sampled.len() - n_pos,
        },
        d_logits,
        d_reg,
    )
}

/// Greedy NMS: visit boxes by descending score (ties by lower index) and
/// drop any box whose IoU with an already kept box exceeds the threshold.
pub fn nms(boxes: &[Box3], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Per-anchor logits and deltas of sample `n` in anchor order.
pub(crate) fn unpack_heads(trace: &DetectorTrace<f32>, n: usize, n_anchors: usize) -> (Vec<f64>, Vec<[f64; 6]>) {
    let cls = trace.cls.sample(n);
    let reg = trace.reg.sample(n);
    let plane = trace.cls.plane();
    let mut logits = Vec::with_capacity(plane * n_anchors);
    let mut deltas = Vec::with_capacity(plane * n_anchors);
    for cell in 0..plane {
        for a in 0..n_anchors {
            logits.push(cls[a * plane + cell] as f64);
            let mut d = [0.0; 6];
            for (k, v) in d.iter_mut().enumerate() {
                *v = reg[(a * 6 + k) * plane + cell] as f64;
            }
            deltas.push(d);
        }
    }
    (logits, deltas)
}

/// Scatter anchor-ordered gradients back into head layout for sample `n`.
pub(crate) fn pack_head_grads(
    d_cls: &mut Tensor<f32>,
    d_reg: &mut Tensor<f32>,
    n: usize,
    n_anchors: usize,
    d_logits: &[f64],
    d_deltas: &[[f64; 6]],
) {
    let plane = d_cls.plane();
    let c = d_cls.sample_mut(n);
    for cell in 0..plane {
        for a in 0..n_anchors {
            c[a * plane + cell] = d_logits[cell * n_anchors + a] as f32;
        }
    }
    let r = d_reg.sample_mut(n);
    for cell in 0..plane {
        for a in 0..n_anchors {
            for k in 0..6 {
                r[(a * 6 + k) * plane + cell] = d_deltas[cell * n_anchors + a][k] as f32;
            }
        }
    }
}

/// A trained network with its configuration.
#[derive(Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub net: DetectorNet<f32>,
}

impl Detector {
    pub fn from_checkpoint(ck: &DetectorCheckpoint) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = DetectorNet::new(&ck.manifest.config, &mut rng)?;
        net.import_state(&ck.weights)?;
        Ok(Self {
            config: ck.manifest.config.clone(),
            net,
        })
    }

    /// Thresholded, NMS-suppressed detections, highest score first.
    pub fn infer(&mut self, scan: &Volume) -> Result<Vec<Detection>> {
        infer(&mut self.net, scan, &self.config)
    }
}

pub fn infer(net: &mut DetectorNet<f32>, scan: &Volume, config: &DetectorConfig) -> Result<Vec<Detection>> {
    let shape = scan.shape();
    if shape.iter().any(|&d| d < STRIDE) {
        return Err(Error::InvalidArgument(format!(
            "scan '{}' of shape {shape:?} is smaller than the minimum input {STRIDE}³",
            scan.scan_id
        )));
    }
    let x = Tensor::from_vec([1, 1, shape[0], shape[1], shape[2]], scan.data().to_vec());
    let trace = net.forward(&x, false)?;
    let grid = trace.cls.spatial();
    let anchors = generate_anchors(config, grid, shape);
    let (logits, deltas) = unpack_heads(&trace, 0, net.n_anchors);
    let bounds = scan.bounds();
    let mut cand: Vec<(Box3, f64)> = Vec::new();
    for i in 0..anchors.len() {
        let p = sigmoid(logits[i]);
        if p < config.detection_threshold {
            continue;
        }
        if let Some(b) = decode_deltas(&anchors[i], &deltas[i]).clip_to(&bounds) {
            cand.push((b, p));
        }
    }
    let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
    let order = score_order(&scores);
    let top: Vec<(Box3, f64)> = order.into_iter().take(config.pre_nms_top_k).map(|i| cand[i]).collect();
    let boxes: Vec<Box3> = top.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = top.iter().map(|c| c.1).collect();
    Ok(nms(&boxes, &scores, config.nms_iou)
        .into_iter()
        .map(|i| Detection {
            scan_id: scan.scan_id.clone(),
            bbox: boxes[i],
            score: scores[i],
        })
        .collect())
}
