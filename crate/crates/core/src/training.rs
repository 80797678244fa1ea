//! Adversarial training loop, checkpoints, conditional synthesis and
//! augmented-dataset construction.

use crate::blending::{blend_boundary, finalize_synthetic, modified_region, BlendConfig};
use crate::conditioning::{
    assemble_input, composite, fill_noise, insert_noise_box, tile_conditions, ConditionLabel, CHANNEL_ORDER,
};
use crate::dataset::{DatasetManifest, ManifestEntry, NoduleAnnotation, Split};
use crate::mcgan::losses::{
    generator_objective, l1_term, lsgan_d_loss_grad, lsgan_g_loss, wgan_d_terms_grad, wgan_g_loss,
    GeneratorLossParts, ObjectiveMode, DEFAULT_GP_LAMBDA,
};
use crate::mcgan::models::{ArchConfig, ContextDiscriminator, Generator, Mode, NoduleCritic};
use crate::nn::{Adam, AdamConfig, Parameterized, Tensor};
use crate::volume::{extract_scaled_voi, Box3, Volume, Voi, NODULE_SIDE, VOI_SIDE};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Mix a base seed with stage-specific parts (SplitMix64 finaliser).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Hex SHA-256 of a serialisable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

// ---------------------------------------------------------------------------
// configuration and data
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Every `period`-th step (index ≡ period − 1) swaps the real/synthetic
    /// targets of both discriminators.
    pub label_flip_period: usize,
    pub mode: ObjectiveMode,
    pub gp_lambda: f64,
    pub seed: u64,
    /// Emit an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub arch: ArchConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            total_steps: 6_000_000,
            batch_size: 16,
            learning_rate: 2.0e-4,
            beta1: 0.5,
            beta2: 0.9,
            label_flip_period: 3,
            mode: ObjectiveMode::NoL1,
            gp_lambda: DEFAULT_GP_LAMBDA,
            seed: 0,
            checkpoint_every: 100_000,
            arch: ArchConfig::default(),
        }
    }

    /// Reduced networks and schedule for CPU runs.
    pub fn desk() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 2,
            checkpoint_every: 0,
            arch: ArchConfig {
                base_width: 8,
                kernel: 2,
                ..ArchConfig::default()
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Configuration("batch_size and total_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Configuration("learning_rate must be > 0".into()));
        }
        if self.label_flip_period == 0 {
            return Err(Error::Configuration("label_flip_period must be >= 1".into()));
        }
        if !(self.gp_lambda >= 0.0) {
            return Err(Error::Configuration("gp_lambda must be >= 0".into()));
        }
        self.arch.validate()
    }

    pub fn is_flipped(&self, step: usize) -> bool {
        step % self.label_flip_period == self.label_flip_period - 1
    }
}

/// One training VOI around a real nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSample {
    pub scan_id: String,
    pub split: Split,
    pub voi: Voi,
    pub label: ConditionLabel,
}

/// VOIs for every nodule of every training scan. Other splits are skipped.
pub fn gan_samples(
    manifest: &DatasetManifest,
    mut load: impl FnMut(&ManifestEntry) -> Result<Volume>,
) -> Result<Vec<GanSample>> {
    let mut out = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == Some(Split::Train)) {
        if entry.nodules.is_empty() {
            continue;
        }
        let scan = load(entry)?;
        for n in &entry.nodules {
            out.push(GanSample {
                scan_id: entry.scan_id.clone(),
                split: Split::Train,
                voi: extract_scaled_voi(&scan, &n.bbox)?,
                label: n.label(),
            });
        }
    }
    Ok(out)
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub d1_loss: f64,
    pub d2_loss: f64,
    pub g_loss: f64,
    pub l1_term: f64,
    pub flipped: bool,
}

impl LossRow {
    pub fn is_finite(&self) -> bool {
        [self.d1_loss, self.d2_loss, self.g_loss, self.l1_term].iter().all(|v| v.is_finite())
    }
}

pub const LOSS_CSV_HEADER: &str = "step,d1_loss,d2_loss,g_loss,l1_term,flipped";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.d1_loss, r.d2_loss, r.g_loss, r.l1_term, r.flipped as u8);
    }
    s
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const GENERATOR_FILE: &str = "generator.f32";
const CONTEXT_FILE: &str = "context_discriminator.f32";
const CRITIC_FILE: &str = "nodule_critic.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub values: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub channel_order: Vec<String>,
    pub mode: ObjectiveMode,
    pub gp_lambda: f64,
    pub step: usize,
    pub arch: ArchConfig,
    pub files: BTreeMap<String, StoredArray>,
}

/// Network states of a trained (or partially trained) MCGAN.
#[derive(Clone, Debug, PartialEq)]
pub struct McganCheckpoint {
    pub manifest: CheckpointManifest,
    pub generator: Vec<f32>,
    pub context: Vec<f32>,
    pub critic: Vec<f32>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl McganCheckpoint {
    fn capture(
        config: &TrainConfig,
        step: usize,
        g: &Generator<f32>,
        d1: &ContextDiscriminator<f32>,
        d2: &NoduleCritic<f32>,
    ) -> Result<Self> {
        let mut ck = Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: "mcgan".into(),
                config_hash: config_hash(config)?,
                channel_order: CHANNEL_ORDER.iter().map(|s| s.to_string()).collect(),
                mode: config.mode,
                gp_lambda: config.gp_lambda,
                step,
                arch: config.arch.clone(),
                files: BTreeMap::new(),
            },
            generator: g.export_state(),
            context: d1.export_state(),
            critic: d2.export_state(),
        };
        ck.refresh_digests();
        Ok(ck)
    }

    fn arrays(&self) -> [(&'static str, &Vec<f32>); 3] {
        [(GENERATOR_FILE, &self.generator), (CONTEXT_FILE, &self.context), (CRITIC_FILE, &self.critic)]
    }

    fn refresh_digests(&mut self) {
        let files = self
            .arrays()
            .iter()
            .map(|(name, v)| {
                (
                    name.to_string(),
                    StoredArray {
                        values: v.len(),
                        sha256: hex::encode(Sha256::digest(f32_bytes(v))),
                    },
                )
            })
            .collect();
        self.manifest.files = files;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, v) in self.arrays() {
            let p = dir.join(name);
            std::fs::write(&p, f32_bytes(v)).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("MANIFEST.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("MANIFEST.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION || manifest.kind != "mcgan" {
            return Err(Error::format(&p, format!(
                "unsupported checkpoint kind/version {} v{}",
                manifest.kind, manifest.format_version
            )));
        }
        let read = |name: &str| -> Result<Vec<f32>> {
            let fp = dir.join(name);
            let bytes = std::fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
            let meta = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::format(&p, format!("manifest lacks {name}")))?;
            if bytes.len() != 4 * meta.values || hex::encode(Sha256::digest(&bytes)) != meta.sha256 {
                return Err(Error::Consistency(format!("{} does not match its manifest digest", fp.display())));
            }
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        Ok(Self {
            generator: read(GENERATOR_FILE)?,
            context: read(CONTEXT_FILE)?,
            critic: read(CRITIC_FILE)?,
            manifest,
        })
    }

    /// Fails unless the checkpoint uses the current channel order.
    pub fn check_channel_order(&self) -> Result<()> {
        if self.manifest.channel_order != CHANNEL_ORDER {
            return Err(Error::Consistency(format!(
                "checkpoint channel order {:?} differs from {:?}",
                self.manifest.channel_order, CHANNEL_ORDER
            )));
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<Generator<f32>> {
        self.check_channel_order()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::new(self.manifest.arch.clone(), &mut rng)?;
        g.import_state(&self.generator)?;
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

pub enum TrainEvent<'a> {
    Step(&'a LossRow),
    Checkpoint(&'a McganCheckpoint),
    /// A loss became non-finite; the snapshot holds the networks at that step.
    Diverged { row: &'a LossRow, snapshot: &'a McganCheckpoint },
}

pub struct TrainOutcome {
    pub checkpoint: McganCheckpoint,
    pub losses: Vec<LossRow>,
}

/// Reverse the y and/or x axis of a cube of side `side`.
pub fn flip_cube(data: &[f32], side: usize, flip_y: bool, flip_x: bool) -> Vec<f32> {
    if !flip_y && !flip_x {
        return data.to_vec();
    }
    let mut out = vec![0.0; data.len()];
    for z in 0..side {
        for y in 0..side {
            let sy = if flip_y { side - 1 - y } else { y };
            for x in 0..side {
                let sx = if flip_x { side - 1 - x } else { x };
                out[(z * side + y) * side + x] = data[(z * side + sy) * side + sx];
            }
        }
    }
    out
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn center_crop_grad(d_voi: &[f32]) -> Vec<f32> {
    let b = Voi::center_box();
    b.voxels()
        .map(|[z, y, x]| d_voi[Voi::index(z as usize, y as usize, x as usize)])
        .collect()
}

struct Batch {
    real_voi: Tensor<f32>,
    real_nodule: Vec<f32>,
    g_input: Tensor<f32>,
    critic_conditions: Vec<Vec<f32>>,
}

fn sample_batch(samples: &[GanSample], size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let n3 = NODULE_SIDE.pow(3);
    let v3 = VOI_SIDE.pow(3);
    let mut voi = Vec::with_capacity(size * v3);
    let mut g_in = Vec::with_capacity(size * 7 * v3);
    let mut real_nodule = Vec::with_capacity(size * n3);
    let mut critic_conditions = Vec::with_capacity(size);
    let center = Voi::center_box();
    for _ in 0..size {
        let s = &samples[rng.random_range(0..samples.len())];
        let (fy, fx) = (rng.random::<bool>(), rng.random::<bool>());
        let flipped = flip_cube(&s.voi.data, VOI_SIDE, fy, fx);
        real_nodule.extend(center.voxels().map(|[z, y, x]| flipped[Voi::index(z as usize, y as usize, x as usize)]));
        let mut noised = flipped.clone();
        fill_noise(&mut noised, &center, rng);
        g_in.extend_from_slice(&noised);
        g_in.extend(tile_conditions(s.label, VOI_SIDE));
        voi.extend_from_slice(&flipped);
        critic_conditions.push(tile_conditions(s.label, NODULE_SIDE));
    }
    Batch {
        real_voi: Tensor::from_vec([size, 1, VOI_SIDE, VOI_SIDE, VOI_SIDE], voi),
        real_nodule,
        g_input: Tensor::from_vec([size, 7, VOI_SIDE, VOI_SIDE, VOI_SIDE], g_in),
        critic_conditions,
    }
}

fn critic_batch(nodules: &[f32], conditions: &[Vec<f32>]) -> Tensor<f32> {
    let n3 = NODULE_SIDE.pow(3);
    let mut data = Vec::with_capacity(conditions.len() * 7 * n3);
    for (i, c) in conditions.iter().enumerate() {
        data.extend_from_slice(&nodules[i * n3..(i + 1) * n3]);
        data.extend_from_slice(c);
    }
    Tensor::from_vec([conditions.len(), 7, NODULE_SIDE, NODULE_SIDE, NODULE_SIDE], data)
}

fn composite_batch(real_voi: &Tensor<f32>, fake: &Tensor<f32>) -> Result<Tensor<f32>> {
    let b = real_voi.batch();
    let mut data = Vec::with_capacity(real_voi.data().len());
    for i in 0..b {
        data.extend(composite(real_voi.sample(i), fake.sample(i))?);
    }
    Ok(Tensor::from_vec(real_voi.shape(), data))
}

/// Train generator, context discriminator and nodule critic jointly.
pub fn train_mcgan(
    samples: &[GanSample],
    config: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Configuration("training split holds no nodules".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.split != Split::Train) {
        return Err(Error::Consistency(format!(
            "scan '{}' from the {} split reached the GAN trainer",
            s.scan_id,
            s.split.as_str()
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut g = Generator::<f32>::new(config.arch.clone(), &mut init_rng)?;
    let mut d1 = ContextDiscriminator::<f32>::new(config.arch.clone(), &mut init_rng)?;
    let mut d2 = NoduleCritic::<f32>::new(config.arch.clone(), &mut init_rng)?;
    let adam = AdamConfig {
        lr: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        ..AdamConfig::default()
    };
    let (mut opt_g, mut opt_d1, mut opt_d2) = (Adam::new(adam), Adam::new(adam), Adam::new(adam));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let bsz = config.batch_size;
    let mut losses = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let flipped = config.is_flipped(step);
        let batch = sample_batch(samples, bsz, &mut rng);
        let g_trace = g.forward(&batch.g_input, Mode::Train, &mut rng)?;
        let fake = g_trace.output().clone();

        // context discriminator
        let fake_comp = composite_batch(&batch.real_voi, &fake)?;
        d1.zero_grad();
        let t_real = d1.forward(&batch.real_voi, Mode::Train)?;
        let t_fake = d1.forward(&fake_comp, Mode::Train)?;
        let (d1_loss, g_real, g_fake) = lsgan_d_loss_grad(
            &to_f64(t_real.output().data()),
            &to_f64(t_fake.output().data()),
            flipped,
        )?;
        d1.backward(&t_real, &Tensor::from_vec(t_real.output().shape(), to_f32(&g_real)), true, false);
        d1.backward(&t_fake, &Tensor::from_vec(t_fake.output().shape(), to_f32(&g_fake)), true, false);
        opt_d1.step(&mut d1.params_mut());

        // nodule critic
        let real_c = critic_batch(&batch.real_nodule, &batch.critic_conditions);
        let fake_c = critic_batch(fake.data(), &batch.critic_conditions);
        d2.zero_grad();
        let c_real = d2.forward(&real_c)?;
        let c_fake = d2.forward(&fake_c)?;
        let (w_terms, gr, gf) = wgan_d_terms_grad(&to_f64(c_real.scores()), &to_f64(c_fake.scores()), flipped)?;
        d2.backward(&c_real, &to_f32(&gr), true, false);
        d2.backward(&c_fake, &to_f32(&gf), true, false);
        let eps: Vec<f32> = (0..bsz).map(|_| rng.random::<f32>()).collect();
        let mut hat = real_c.clone();
        for n in 0..bsz {
            let e = eps[n];
            for (h, f) in hat.sample_mut(n).iter_mut().zip(fake_c.sample(n)) {
                *h = e * *h + (1.0 - e) * *f;
            }
        }
        let gp = d2.gradient_penalty_backward(&hat, config.gp_lambda)?;
        let d2_loss = w_terms + gp.penalty;
        opt_d2.step(&mut d2.params_mut());

        // generator
        let t_gen = d1.forward(&fake_comp, Mode::Train)?;
        let s_gen = to_f64(t_gen.output().data());
        let lsgan_g = lsgan_g_loss(&s_gen)?;
        let d_s: Vec<f32> = s_gen.iter().map(|s| ((s - 1.0) / s_gen.len() as f64) as f32).collect();
        let d_comp = d1
            .backward(&t_gen, &Tensor::from_vec(t_gen.output().shape(), d_s), false, true)
            .expect("input gradient requested");
        let c_gen = d2.forward(&fake_c)?;
        let wgan_g = wgan_g_loss(&to_f64(c_gen.scores()))?;
        let d_crit = d2
            .backward(&c_gen, &vec![-1.0 / bsz as f32; bsz], false, true)
            .expect("input gradient requested");
        let n3 = NODULE_SIDE.pow(3);
        let l1 = l1_term(&to_f64(fake.data()), &to_f64(&batch.real_nodule))?;
        let l1_w = config.mode.l1_weight();
        let mut d_fake = Tensor::<f32>::zeros(fake.shape());
        for n in 0..bsz {
            let from_ctx = center_crop_grad(d_comp.sample(n));
            let from_crit = &d_crit.sample(n)[..n3];
            let real = &batch.real_nodule[n * n3..(n + 1) * n3];
            let f = fake.sample(n);
            let out = d_fake.sample_mut(n);
            for i in 0..n3 {
                let sign = if f[i] > real[i] {
                    1.0
                } else if f[i] < real[i] {
                    -1.0
                } else {
                    0.0
                };
                out[i] = from_ctx[i] + from_crit[i] + (l1_w * sign / (bsz * n3) as f64) as f32;
            }
        }
        g.zero_grad();
        g.backward(&g_trace, &d_fake);
        opt_g.step(&mut g.params_mut());

        let parts = GeneratorLossParts { lsgan_g, wgan_g, l1 };
        let row = LossRow {
            step,
            d1_loss,
            d2_loss,
            g_loss: generator_objective(config.mode, parts),
            l1_term: l1,
            flipped,
        };
        if !row.is_finite() {
            let snapshot = McganCheckpoint::capture(config, step + 1, &g, &d1, &d2)?;
            on_event(TrainEvent::Diverged { row: &row, snapshot: &snapshot })?;
            return Err(Error::NonFinite(format!(
                "step {step}: d1={} d2={} g={} l1={}",
                row.d1_loss, row.d2_loss, row.g_loss, row.l1_term
            )));
        }
        on_event(TrainEvent::Step(&row))?;
        losses.push(row);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.total_steps {
            let ck = McganCheckpoint::capture(config, step + 1, &g, &d1, &d2)?;
            on_event(TrainEvent::Checkpoint(&ck))?;
        }
    }
    let checkpoint = McganCheckpoint::capture(config, config.total_steps, &g, &d1, &d2)?;
    Ok(TrainOutcome { checkpoint, losses })
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub source: NoduleAnnotation,
    pub label: ConditionLabel,
    /// Fractions of the source extent, each within ±0.1.
    pub shift: [f64; 3],
    /// Within `[0.9, 1.1]`.
    pub zoom: f64,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn unshifted(source: NoduleAnnotation, seed: u64) -> Self {
        Self {
            label: source.label(),
            source,
            shift: [0.0; 3],
            zoom: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label != self.source.label() {
            return Err(Error::InvalidArgument(format!(
                "requested label {} differs from the source nodule's {}",
                self.label,
                self.source.label()
            )));
        }
        if self.shift.iter().any(|s| !(s.abs() <= 0.1)) {
            return Err(Error::InvalidArgument(format!("shift {:?} exceeds ±10%", self.shift)));
        }
        if !(0.9..=1.1).contains(&self.zoom) {
            return Err(Error::InvalidArgument(format!("zoom {} outside [0.9, 1.1]", self.zoom)));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Placement after shifting by `shift · extent` voxels (round half up) and
/// zooming about the centre.
pub fn placement_box(source: &Box3, shift: [f64; 3], zoom: f64) -> Result<Box3> {
    let e = source.extent();
    let mut min = [0i64; 3];
    let mut max = [0i64; 3];
    for a in 0..3 {
        let extent = round_half_up(e[a] as f64 * zoom).max(2);
        let offset = round_half_up(shift[a] * e[a] as f64);
        min[a] = source.min[a] + offset + (e[a] - extent).div_euclid(2);
        max[a] = min[a] + extent;
    }
    Box3::new(min, max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Generator output, 32³.
    pub nodule: Vec<f32>,
    pub placement: Box3,
    /// Working-resolution VOI around the placement (before noise).
    pub voi: Voi,
}

/// Inference wrapper around a checkpoint's generator.
pub struct Synthesizer {
    generator: Generator<f32>,
    pub mode: ObjectiveMode,
}

impl Synthesizer {
    pub fn new(checkpoint: &McganCheckpoint) -> Result<Self> {
        Ok(Self {
            generator: checkpoint.generator()?,
            mode: checkpoint.manifest.mode,
        })
    }

    pub fn synthesize(&mut self, scan: &Volume, request: &SynthesisRequest) -> Result<Synthesis> {
        request.validate()?;
        if request.source.scan_id != scan.scan_id {
            return Err(Error::Consistency(format!(
                "source nodule belongs to '{}', not '{}'",
                request.source.scan_id, scan.scan_id
            )));
        }
        let placement = placement_box(&request.source.bbox, request.shift, request.zoom)?;
        if !scan.bounds().contains_box(&placement) {
            return Err(Error::OutOfBounds(format!(
                "placement {placement:?} escapes scan of shape {:?}",
                scan.shape()
            )));
        }
        let voi = extract_scaled_voi(scan, &placement)?;
        let noised = insert_noise_box(&voi, request.seed);
        let input = assemble_input(&noised, request.label)?;
        let nodule = self.generator.generate(&input.tensor)?.into_vec();
        Ok(Synthesis { nodule, placement, voi })
    }

    /// Synthesise, composite, blend and write back one nodule.
    pub fn render_into(
        &mut self,
        scan: &Volume,
        request: &SynthesisRequest,
        blend: &BlendConfig,
    ) -> Result<(Volume, Synthesis, Box3)> {
        let s = self.synthesize(scan, request)?;
        let comp = composite(&s.voi.data, &s.nodule)?;
        let blended = blend_boundary(&comp, &s.voi.nodule_box, blend)?;
        let out = finalize_synthetic(scan, &s.voi, &blended, blend)?;
        let footprint = s
            .voi
            .scan_footprint(&modified_region(&s.voi, blend), &scan.bounds())
            .ok_or_else(|| Error::OutOfBounds("empty synthetic footprint".into()))?;
        Ok((out, s, footprint))
    }
}

pub fn synthesize_nodule(checkpoint: &McganCheckpoint, scan: &Volume, request: &SynthesisRequest) -> Result<Synthesis> {
    Synthesizer::new(checkpoint)?.synthesize(scan, request)
}

// ---------------------------------------------------------------------------
// augmented datasets
// ---------------------------------------------------------------------------

/// Loads source scans and persists synthetic ones.
pub trait ScanStore {
    fn load(&self, entry: &ManifestEntry) -> Result<Volume>;
    /// Persist a synthetic scan; returns the path to record in the manifest.
    fn store(&self, volume: &Volume) -> Result<PathBuf>;
}

/// Where a synthetic scan was modified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub scan_id: String,
    pub source_scan_id: String,
    pub copy: usize,
    pub placements: Vec<Box3>,
    pub footprints: Vec<Box3>,
}

pub struct AugmentOutcome {
    pub manifest: DatasetManifest,
    pub records: Vec<SyntheticRecord>,
}

/// Up to this many random shift/zoom draws per nodule before falling back to
/// the unshifted placement.
const PLACEMENT_RETRIES: usize = 16;

/// For each of `ratio` copies, every training scan gets a synthetic twin
/// whose nodules are all replaced by generated ones.
pub fn build_augmented_dataset(
    checkpoint: &McganCheckpoint,
    manifest: &DatasetManifest,
    ratio: usize,
    seed: u64,
    blend: &BlendConfig,
    store: &dyn ScanStore,
) -> Result<AugmentOutcome> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("augmentation ratio must be >= 1".into()));
    }
    let mut synth = Synthesizer::new(checkpoint)?;
    let train: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Some(Split::Train) && !e.synthetic)
        .collect();
    let mut entries: Vec<ManifestEntry> = train.iter().map(|e| (*e).clone()).collect();
    let mut records = Vec::new();
    for copy in 1..=ratio {
        for (si, entry) in train.iter().enumerate() {
            let scan = store.load(entry)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[copy as u64, si as u64]));
            let syn_id = format!("{}_syn{copy}", entry.scan_id);
            let mut current = scan.clone();
            current.scan_id = syn_id.clone();
            let mut nodules = Vec::new();
            let mut placements = Vec::new();
            let mut footprints = Vec::new();
            for ann in entry.annotations() {
                let mut source = ann.clone();
                source.scan_id = syn_id.clone();
                let mut request = None;
                for _ in 0..PLACEMENT_RETRIES {
                    let shift = [0, 1, 2].map(|_| rng.random_range(-0.1..=0.1));
                    let zoom = rng.random_range(0.9..=1.1);
                    let seed = rng.random::<u64>();
                    let b = placement_box(&ann.bbox, shift, zoom)?;
                    if current.bounds().contains_box(&b) {
                        request = Some(SynthesisRequest { label: ann.label(), source: source.clone(), shift, zoom, seed });
                        break;
                    }
                }
                let request = request.unwrap_or_else(|| SynthesisRequest::unshifted(source.clone(), rng.random()));
                let (next, s, footprint) = synth.render_into(&current, &request, blend)?;
                current = next;
                nodules.push(crate::dataset::NoduleRecord { bbox: s.placement, ..ann.record() });
                placements.push(s.placement);
                footprints.push(footprint);
            }
            let path = store.store(&current)?;
            let shape = current.shape();
            entries.push(ManifestEntry {
                scan_id: syn_id.clone(),
                path,
                spacing_mm: Some(current.spacing()),
                n_slices: Some(shape[0]),
                split: Some(Split::Train),
                nodules,
                synthetic: true,
                source_scan_id: Some(entry.scan_id.clone()),
            });
            records.push(SyntheticRecord {
                scan_id: syn_id,
                source_scan_id: entry.scan_id.clone(),
                copy,
                placements,
                footprints,
            });
        }
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX])));
    entries.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.split != Some(Split::Train))
            .cloned(),
    );
    Ok(AugmentOutcome {
        manifest: DatasetManifest::new(entries)?,
        records,
    })
}
