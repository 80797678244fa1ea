//! Subcommand definitions and their module call chains.

use crate::config::{PipelineConfig, Profile};
use crate::error::{CliError, CliResult};
use crate::run::{relative_to, FsStore, LoadedManifest, RunDir, AUGMENT, DATASET, POOL, SCAN_EXT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcgan_core::blending::blend_boundary;
use mcgan_core::conditioning::composite;
use mcgan_core::dataset::{filter_scans_with, split_dataset, DatasetManifest, ManifestEntry, NoduleRecord, Split, SplitPolicy};
use mcgan_core::detector::{
    detections_csv, train_detector, Detection, Detector, DetectorCheckpoint, DetectorEvent, LossBreakdown,
};
use mcgan_core::evaluation::{evaluation_report, SESSION_ITEMS, froc_csv, tsne_csv, tsne_embed, StrataSelection, TsnePoint};
use mcgan_core::io::{read_volume, volume_stem, write_volume};
use mcgan_core::mcgan::ObjectiveMode;
use mcgan_core::phantom::generate_phantom;
use mcgan_core::training::{
    build_augmented_dataset, derive_seed, gan_samples, loss_csv, train_mcgan, McganCheckpoint, SynthesisRequest,
    Synthesizer, TrainEvent,
};
use mcgan_core::volume::{extract_scaled_voi, Volume, NODULE_SIDE};
use mcgan_core::vtt::{responses_from_logs, test_report, ImageKind, PoolCategory, TEST_IDS};
use mcgan_core::Error;
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const DATASET_MANIFEST: &str = "dataset/manifest.json";
const AUGMENT_MANIFEST: &str = "augment/manifest.json";
const DETECTORS: &str = "detectors";
const VTT_LOGS: &str = "vtt/logs";

#[derive(Parser, Debug)]
#[command(name = "mcgan", version, about = "3D multi-conditional GAN nodule augmentation pipeline")]
pub struct Cli {
    /// Directory holding every stage's outputs.
    #[arg(long, global = true, default_value = "run", env = "MCGAN_RUN_DIR")]
    pub run_dir: PathBuf,
    /// JSON config overlaid on the profile defaults.
    #[arg(long, global = true, env = "MCGAN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Default hyperparameter set.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter and split a manifest of pre-converted scans.
    Ingest(IngestArgs),
    /// Generate phantom scans with exact nodule annotations.
    Phantom(PhantomArgs),
    /// Train the generator and both discriminators.
    TrainGan(TrainGanArgs),
    /// Synthesize one nodule into a scan, or export a rating-study pool.
    Synthesize(SynthesizeArgs),
    /// Add synthetic copies of the training scans.
    Augment(AugmentArgs),
    /// Train the nodule detector.
    TrainDetector(TrainDetectorArgs),
    /// FROC/CPM report over every trained detector.
    Evaluate(EvaluateArgs),
    /// 2-D embedding of real and synthetic nodule images.
    Tsne(TsneArgs),
    /// Serve the rating-study API.
    VttServe(VttServeArgs),
    /// Confusion tables from the rating-study logs.
    VttReport(VttReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Phantom(_) => "phantom",
            Command::TrainGan(_) => "train-gan",
            Command::Synthesize(_) => "synthesize",
            Command::Augment(_) => "augment",
            Command::TrainDetector(_) => "train-detector",
            Command::Evaluate(_) => "evaluate",
            Command::Tsne(_) => "tsne",
            Command::VttServe(_) => "vtt-serve",
            Command::VttReport(_) => "vtt-report",
        }
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Input manifest; relative scan paths resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub nodule_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the input's split assignments instead of re-splitting.
    #[arg(long)]
    pub keep_splits: bool,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scans: Option<usize>,
    #[arg(long)]
    pub nodules: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    NoL1,
    WithL1,
}

impl From<ModeArg> for ObjectiveMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::NoL1 => ObjectiveMode::NoL1,
            ModeArg::WithL1 => ObjectiveMode::WithL1,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainGanArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Trained generator to use (`no_l1` or `with_l1`; default from config).
    #[arg(long)]
    pub gan: Option<String>,
    #[arg(long, required_unless_present = "pool")]
    pub scan: Option<String>,
    /// Index of the source nodule within the scan.
    #[arg(long, default_value_t = 0)]
    pub nodule: usize,
    /// Shift as fractions of the nodule extent, `z,y,x`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub shift: Option<Vec<f64>>,
    #[arg(long)]
    pub zoom: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Export real and synthetic nodules and VOIs from every trained generator.
    #[arg(long, conflicts_with = "scan")]
    pub pool: bool,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long)]
    pub gan: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DetectorInput {
    Real,
    Augmented,
}

impl DetectorInput {
    fn as_str(self) -> &'static str {
        match self {
            DetectorInput::Real => "real",
            DetectorInput::Augmented => "augmented",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    #[arg(long, value_enum, default_value = "augmented")]
    pub input: DetectorInput,
    /// Name of the configuration in reports (default: the input kind).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ByArg {
    All,
    Size,
    Attenuation,
    None,
}

impl From<ByArg> for StrataSelection {
    fn from(b: ByArg) -> Self {
        match b {
            ByArg::All => StrataSelection::All,
            ByArg::Size => StrataSelection::Size,
            ByArg::Attenuation => StrataSelection::Attenuation,
            ByArg::None => StrataSelection::None,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Stratum columns in the report.
    #[arg(long, value_enum)]
    pub by: Option<ByArg>,
    /// Detector names (default: all trained).
    #[arg(long, value_delimiter = ',')]
    pub detectors: Vec<String>,
    #[arg(long)]
    pub iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TsneArgs {
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Item pool (default: the run's exported pool).
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VttServeArgs {
    /// Item pool (default: the run's exported pool).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Static asset directory served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VttReportArgs {
    /// Test to report (default: all four).
    #[arg(long)]
    pub test: Option<u8>,
}

pub struct Context {
    pub run: RunDir,
    pub config: PipelineConfig,
}

/// Resolve the configuration and dispatch.
pub fn execute(cli: Cli) -> CliResult<()> {
    let config = PipelineConfig::resolve(cli.profile, cli.config.as_deref())?;
    let mut ctx = Context {
        run: RunDir::new(&cli.run_dir)?,
        config,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&mut ctx, a),
        Command::Phantom(a) => phantom(&mut ctx, a),
        Command::TrainGan(a) => train_gan(&mut ctx, a),
        Command::Synthesize(a) => synthesize(&mut ctx, a),
        Command::Augment(a) => augment(&mut ctx, a),
        Command::TrainDetector(a) => train_detector_cmd(&mut ctx, a),
        Command::Evaluate(a) => evaluate(&mut ctx, a),
        Command::Tsne(a) => tsne(&mut ctx, a),
        Command::VttServe(a) => vtt_serve(&mut ctx, a),
        Command::VttReport(a) => vtt_report(&mut ctx, a),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn scan_file(scan_id: &str) -> String {
    format!("scans/{scan_id}.{SCAN_EXT}")
}

fn ingest(ctx: &mut Context, a: IngestArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        ctx.config.seeds.split = s;
    }
    if a.nodule_cap.is_some() {
        ctx.config.split.nodule_cap = a.nodule_cap;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    if !a.manifest.exists() {
        return Err(Error::NotFound(format!("input manifest {}", a.manifest.display())).into());
    }
    let input = LoadedManifest::load(&std::path::absolute(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?)?;
    let outcome = filter_scans_with(&input.manifest, &cfg.filter);
    let mut kept = outcome.kept;
    for e in &mut kept.entries {
        let p = input.resolve(e);
        if !p.exists() {
            return Err(Error::NotFound(format!("scan '{}' at {}", e.scan_id, p.display())).into());
        }
        e.path = p;
    }
    let keep = a.keep_splits && kept.entries.iter().all(|e| e.split.is_some());
    let split = if keep {
        kept
    } else {
        let [train, val, test] = cfg.split.ratios;
        split_dataset(&kept, &SplitPolicy::Ratios { train, val, test }, cfg.split.nodule_cap, cfg.seeds.split)?
    };
    let mut stage = ctx.run.begin(DATASET, "ingest")?;
    stage.input(&input.path)?;
    split.save(&stage.path("manifest.json"))?;
    stage.write_json("rejected.json", &outcome.rejected)?;
    stage.finish(cfg)?;
    print_json(&json!({
        "kept": split.entries.len(),
        "rejected": outcome.rejected.len(),
        "manifest": ctx.run.path(DATASET_MANIFEST),
    }))
}

fn phantom(ctx: &mut Context, a: PhantomArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        ctx.config.seeds.phantom = s;
    }
    if let Some(n) = a.scans {
        ctx.config.phantom.scans = n;
    }
    if let Some(n) = a.nodules {
        ctx.config.phantom.volume.n_nodules = n;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    if cfg.phantom.scans == 0 {
        return Err(CliError::Usage("--scans must be at least 1".into()));
    }
    let stage = ctx.run.begin(DATASET, "phantom")?;
    let mut entries = Vec::with_capacity(cfg.phantom.scans);
    for i in 0..cfg.phantom.scans {
        let id = format!("phantom{i:03}");
        let (volume, anns) = generate_phantom(&id, derive_seed(cfg.seeds.phantom, &[i as u64]), &cfg.phantom.volume)?;
        let rel = scan_file(&id);
        write_volume(&stage.path(&rel), &volume)?;
        entries.push(ManifestEntry {
            scan_id: id,
            path: rel.into(),
            spacing_mm: Some(volume.spacing()),
            n_slices: Some(volume.shape()[0]),
            split: None,
            nodules: anns.iter().map(|n| n.record()).collect(),
            synthetic: false,
            source_scan_id: None,
        });
        log::info!("phantom {}/{}", i + 1, cfg.phantom.scans);
    }
    let [train, val, test] = cfg.split.ratios;
    let manifest = split_dataset(
        &DatasetManifest::new(entries)?,
        &SplitPolicy::Ratios { train, val, test },
        cfg.split.nodule_cap,
        cfg.seeds.split,
    )?;
    manifest.save(&stage.path("manifest.json"))?;
    stage.finish(cfg)?;
    let count = |s: Split| manifest.with_split(s).len();
    print_json(&json!({
        "scans": manifest.entries.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "manifest": ctx.run.path(DATASET_MANIFEST),
    }))
}

fn dataset(ctx: &Context) -> CliResult<LoadedManifest> {
    LoadedManifest::load(&ctx.run.require(DATASET_MANIFEST, "phantom")?)
}

fn gan_stage(name: &str) -> String {
    format!("gan/{name}")
}

fn train_gan(ctx: &mut Context, a: TrainGanArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        ctx.config.gan.total_steps = s;
    }
    if let Some(m) = a.mode {
        ctx.config.gan.mode = m.into();
    }
    if let Some(s) = a.seed {
        ctx.config.gan.seed = s;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let data = dataset(ctx)?;
    let samples = gan_samples(&data.manifest, |e| data.load_scan(e))?;
    log::info!("training on {} nodule VOIs for {} steps", samples.len(), cfg.gan.total_steps);
    let name = cfg.gan.mode.as_str();
    let mut stage = ctx.run.begin(&gan_stage(name), "train-gan")?;
    stage.input(&data.path)?;
    let dir = stage.dir.clone();
    let total = cfg.gan.total_steps;
    let result = train_mcgan(&samples, &cfg.gan, &mut |ev| {
        match ev {
            TrainEvent::Step(row) if (row.step + 1) % 100 == 0 || row.step + 1 == total => {
                log::info!(
                    "step {}/{total} d1 {:.4} d2 {:.4} g {:.4}",
                    row.step + 1,
                    row.d1_loss,
                    row.d2_loss,
                    row.g_loss
                );
            }
            TrainEvent::Step(_) => {}
            TrainEvent::Checkpoint(ck) => ck.save(&dir.join(format!("checkpoints/step_{:08}", ck.manifest.step)))?,
            TrainEvent::Diverged { row, snapshot } => {
                log::error!("diverged at step {}", row.step);
                snapshot.save(&dir.join("diverged"))?;
            }
        }
        Ok(())
    });
    let outcome = result?;
    outcome.checkpoint.save(&stage.path("checkpoint"))?;
    stage.write_text("losses.csv", &loss_csv(&outcome.losses))?;
    stage.finish(cfg)?;
    let last = outcome.losses.last();
    print_json(&json!({
        "checkpoint": ctx.run.path(&gan_stage(name)).join("checkpoint"),
        "steps": outcome.losses.len(),
        "final_g_loss": last.map(|r| r.g_loss),
    }))
}

fn load_gan(ctx: &Context, name: Option<&str>) -> CliResult<(McganCheckpoint, PathBuf)> {
    let name = name.unwrap_or(ctx.config.gan.mode.as_str());
    let dir = ctx.run.require(&format!("{}/checkpoint", gan_stage(name)), "train-gan")?;
    let ck = McganCheckpoint::load(&dir)?;
    ck.check_channel_order()?;
    Ok((ck, dir.join(crate::run::MANIFEST_FILE)))
}

fn cube_volume(id: &str, side: usize, data: Vec<f32>) -> CliResult<Volume> {
    Ok(Volume::new(id, [side; 3], [1.0; 3], data)?)
}

fn synthesize(ctx: &mut Context, a: SynthesizeArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        ctx.config.seeds.synthesize = s;
    }
    if let Some(c) = a.count {
        ctx.config.pool.count = c;
    }
    ctx.config.validate()?;
    if a.pool {
        return export_pool(ctx);
    }
    let cfg = &ctx.config;
    let scan_id = a.scan.as_deref().ok_or_else(|| CliError::Usage("--scan is required without --pool".into()))?;
    let data = dataset(ctx)?;
    let entry = data
        .manifest
        .get(scan_id)
        .ok_or_else(|| Error::NotFound(format!("scan '{scan_id}' in the dataset manifest")))?;
    let source = entry
        .annotations()
        .get(a.nodule)
        .cloned()
        .ok_or_else(|| Error::NotFound(format!("nodule {} of scan '{scan_id}'", a.nodule)))?;
    let (ck, ck_manifest) = load_gan(ctx, a.gan.as_deref())?;
    let shift = match a.shift.as_deref() {
        None => [0.0; 3],
        Some([z, y, x]) => [*z, *y, *x],
        Some(_) => return Err(CliError::Usage("--shift takes three values z,y,x".into())),
    };
    let request = SynthesisRequest {
        label: source.label(),
        source,
        shift,
        zoom: a.zoom.unwrap_or(1.0),
        seed: cfg.seeds.synthesize,
    };
    let scan = data.load_scan(entry)?;
    let mut synth = Synthesizer::new(&ck)?;
    let (out, s, footprint) = synth.render_into(&scan, &request, &cfg.blend)?;
    let mut stage = ctx.run.begin("synthesize", "synthesize")?;
    stage.input(&data.path)?;
    stage.input(&ck_manifest)?;
    write_volume(&stage.path(&format!("scan.{SCAN_EXT}")), &out)?;
    write_volume(&stage.path(&format!("nodule.{SCAN_EXT}")), &cube_volume("nodule", NODULE_SIDE, s.nodule)?)?;
    stage.write_json(
        "record.json",
        &json!({ "request": request, "placement": s.placement, "footprint": footprint, "mode": synth.mode }),
    )?;
    stage.finish(cfg)?;
    print_json(&json!({ "placement": s.placement, "footprint": footprint, "outputs": ctx.run.path("synthesize") }))
}

/// Real nodules and VOIs from the dataset plus synthetic ones from
/// every trained generator, laid out for the rating-study pool.
fn export_pool(ctx: &mut Context) -> CliResult<()> {
    let cfg = &ctx.config;
    let data = dataset(ctx)?;
    let mut gans = Vec::new();
    for mode in [ObjectiveMode::NoL1, ObjectiveMode::WithL1] {
        if ctx.run.path(&format!("{}/checkpoint", gan_stage(mode.as_str()))).exists() {
            gans.push((mode, load_gan(ctx, Some(mode.as_str()))?));
        }
    }
    if gans.is_empty() {
        return Err(CliError::Dependency {
            artifact: ctx.run.path("gan"),
            producer: "train-gan",
        });
    }
    let mut stage = ctx.run.begin(POOL, "synthesize")?;
    stage.input(&data.path)?;
    let mut sources = Vec::new();
    for e in data.manifest.entries.iter().filter(|e| !e.synthetic) {
        let scan = data.load_scan(e)?;
        for (k, ann) in e.annotations().into_iter().enumerate() {
            sources.push((scan.clone(), ann, k));
        }
    }
    if sources.is_empty() {
        return Err(Error::Configuration("the dataset holds no nodules".into()).into());
    }
    for (_, (_, ck_manifest)) in &gans {
        stage.input(ck_manifest)?;
    }
    let out_dir = stage.dir.clone();
    let write_item = |kind: ImageKind, cat: PoolCategory, id: &str, data: Vec<f32>| -> CliResult<()> {
        let rel = format!("{}/{}/{id}.{SCAN_EXT}", kind.dir_name(), cat.dir_name());
        write_volume(&out_dir.join(rel), &cube_volume(id, kind.side(), data)?)?;
        Ok(())
    };
    if sources.len() < SESSION_ITEMS / 2 {
        log::warn!(
            "only {} real nodules; a rating session needs {} per class",
            sources.len(),
            SESSION_ITEMS / 2
        );
    }
    let mut counts = BTreeMap::new();
    for (scan, ann, k) in sources.iter().take(cfg.pool.count) {
        let voi = extract_scaled_voi(scan, &ann.bbox)?;
        let id = format!("{}_n{k}", scan.scan_id);
        write_item(ImageKind::Nodule, PoolCategory::Real, &id, voi.center_crop())?;
        write_item(ImageKind::Voi, PoolCategory::Real, &id, voi.data.clone())?;
        *counts.entry(PoolCategory::Real.dir_name()).or_insert(0usize) += 1;
    }
    for (mode, (ck, _)) in &gans {
        let cat = match mode {
            ObjectiveMode::NoL1 => PoolCategory::SyntheticNoL1,
            ObjectiveMode::WithL1 => PoolCategory::SyntheticWithL1,
        };
        let mut synth = Synthesizer::new(ck)?;
        for i in 0..cfg.pool.count {
            let (scan, ann, k) = &sources[i % sources.len()];
            let request = SynthesisRequest::unshifted(ann.clone(), derive_seed(cfg.seeds.synthesize, &[i as u64]));
            let s = synth.synthesize(scan, &request)?;
            let blended = blend_boundary(&composite(&s.voi.data, &s.nodule)?, &s.voi.nodule_box, &cfg.blend)?;
            let id = format!("{}_n{k}_s{i:03}", scan.scan_id);
            write_item(ImageKind::Nodule, cat, &id, s.nodule)?;
            write_item(ImageKind::Voi, cat, &id, blended)?;
            *counts.entry(cat.dir_name()).or_insert(0usize) += 1;
        }
    }
    stage.finish(cfg)?;
    print_json(&json!({ "pool": ctx.run.path(POOL), "items_per_kind": counts }))
}

fn augment(ctx: &mut Context, a: AugmentArgs) -> CliResult<()> {
    if let Some(r) = a.ratio {
        ctx.config.augment.ratio = r;
    }
    if let Some(s) = a.seed {
        ctx.config.seeds.augment = s;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let data = dataset(ctx)?;
    let (ck, ck_manifest) = load_gan(ctx, a.gan.as_deref())?;
    let mut stage = ctx.run.begin(AUGMENT, "augment")?;
    stage.input(&data.path)?;
    stage.input(&ck_manifest)?;
    let store = FsStore {
        source: &data,
        out_dir: stage.dir.clone(),
    };
    let outcome = build_augmented_dataset(&ck, &data.manifest, cfg.augment.ratio, cfg.seeds.augment, &cfg.blend, &store)?;
    let mut manifest = outcome.manifest;
    for e in manifest.entries.iter_mut().filter(|e| !e.synthetic) {
        e.path = relative_to(&data.resolve(e), &stage.dir);
    }
    manifest.save(&stage.path("manifest.json"))?;
    stage.write_json("records.json", &outcome.records)?;
    stage.finish(cfg)?;
    let synthetic = manifest.entries.iter().filter(|e| e.synthetic).count();
    print_json(&json!({
        "entries": manifest.entries.len(),
        "synthetic": synthetic,
        "manifest": ctx.run.path(AUGMENT_MANIFEST),
    }))
}

const DETECTOR_LOSS_HEADER: &str = "step,lr,classification,regression,total,n_positive,n_negative";

fn train_detector_cmd(ctx: &mut Context, a: TrainDetectorArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        let d = &mut ctx.config.detector;
        d.total_steps = s;
        d.lr_drop_step = d.lr_drop_step.min(s);
        d.select_window = [d.select_window[0].min(s), d.select_window[1].min(s)];
    }
    if let Some(s) = a.seed {
        ctx.config.seeds.detector = s;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let manifest_path = match a.input {
        DetectorInput::Real => ctx.run.require(DATASET_MANIFEST, "phantom")?,
        DetectorInput::Augmented => ctx.run.require(AUGMENT_MANIFEST, "augment")?,
    };
    let data = LoadedManifest::load(&manifest_path)?;
    let name = a.name.unwrap_or_else(|| a.input.as_str().to_string());
    if name.is_empty() || name.contains(['/', '\\', ',']) {
        return Err(CliError::Usage(format!("invalid detector name '{name}'")));
    }
    let stage_name = format!("{DETECTORS}/{name}");
    let mut stage = ctx.run.begin(&stage_name, "train-detector")?;
    stage.input(&data.path)?;
    let mut loss_rows = String::from(DETECTOR_LOSS_HEADER);
    loss_rows.push('\n');
    let mut validation = String::from("step,sensitivity,fp_per_scan\n");
    let total = cfg.detector.total_steps;
    let outcome = train_detector(&data.manifest, &cfg.detector, cfg.seeds.detector, |e| data.load_scan(e), &mut |ev| {
        match ev {
            DetectorEvent::Step { step, lr, loss } => {
                let LossBreakdown {
                    classification,
                    regression,
                    total: t,
                    n_positive,
                    n_negative,
                } = *loss;
                let _ = writeln!(loss_rows, "{step},{lr},{classification},{regression},{t},{n_positive},{n_negative}");
                if (step + 1) % 50 == 0 || step + 1 == total {
                    log::info!("detector step {}/{total} loss {t:.4}", step + 1);
                }
            }
            DetectorEvent::LrDrop { step, from, to } => log::info!("learning rate {from} -> {to} at step {step}"),
            DetectorEvent::Validation {
                step,
                sensitivity,
                fp_per_scan,
            } => {
                let _ = writeln!(validation, "{step},{sensitivity},{fp_per_scan}");
            }
        }
        Ok(())
    })?;
    outcome.checkpoint.save(&stage.path("checkpoint"))?;
    stage.write_text("losses.csv", &loss_rows)?;
    stage.write_text("validation.csv", &validation)?;
    stage.finish(cfg)?;
    print_json(&json!({
        "checkpoint": ctx.run.path(&stage_name).join("checkpoint"),
        "selected_step": outcome.checkpoint.manifest.step,
        "val_sensitivity": outcome.checkpoint.manifest.val_sensitivity,
    }))
}

fn trained_detectors(run: &RunDir) -> CliResult<Vec<String>> {
    let dir = run.path(DETECTORS);
    let mut names = Vec::new();
    if dir.is_dir() {
        for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.join("checkpoint").is_dir() {
                names.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::Dependency {
            artifact: dir,
            producer: "train-detector",
        });
    }
    Ok(names)
}

fn evaluate(ctx: &mut Context, a: EvaluateArgs) -> CliResult<()> {
    if let Some(b) = a.by {
        ctx.config.evaluation.by = b.into();
    }
    if let Some(t) = a.iou {
        ctx.config.evaluation.iou_threshold = t;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let data = dataset(ctx)?;
    let test: Vec<&ManifestEntry> = data.manifest.with_split(Split::Test);
    if test.is_empty() {
        return Err(Error::Configuration("the dataset has no test scans".into()).into());
    }
    let names = if a.detectors.is_empty() { trained_detectors(&ctx.run)? } else { a.detectors.clone() };
    let scans: Vec<Volume> = test.iter().map(|e| data.load_scan(e)).collect::<mcgan_core::Result<_>>()?;
    let gts: BTreeMap<String, Vec<NoduleRecord>> = test.iter().map(|e| (e.scan_id.clone(), e.nodules.clone())).collect();
    let mut stage = ctx.run.begin("evaluate", "evaluate")?;
    stage.input(&data.path)?;
    let mut configs: Vec<(String, Vec<Detection>)> = Vec::new();
    for name in names {
        let ck_dir = ctx.run.require(&format!("{DETECTORS}/{name}/checkpoint"), "train-detector")?;
        stage.input(&ck_dir.join(crate::run::MANIFEST_FILE))?;
        let mut det = Detector::from_checkpoint(&DetectorCheckpoint::load(&ck_dir)?)?;
        let mut dets = Vec::new();
        for s in &scans {
            dets.extend(det.infer(s)?);
        }
        stage.write_text(&format!("detections/{name}.csv"), &detections_csv(&dets))?;
        configs.push((name, dets));
    }
    let (report, curves) = evaluation_report(&configs, &gts, cfg.evaluation.iou_threshold, cfg.evaluation.by)?;
    stage.write_json("report.json", &report)?;
    stage.write_text("froc.csv", &froc_csv(&curves))?;
    stage.finish(cfg)?;
    print_json(&report)
}

/// Nodule cubes of the pool, tagged by category directory.
fn pool_nodules(pool: &Path) -> CliResult<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::new();
    for cat in PoolCategory::ALL {
        let dir = pool.join(ImageKind::Nodule.dir_name()).join(cat.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(SCAN_EXT))
            .collect();
        files.sort();
        for f in files {
            let v = read_volume(&f)?;
            if v.shape() != [NODULE_SIDE; 3] {
                return Err(Error::format(&f, format!("expected a {NODULE_SIDE}³ nodule, got {:?}", v.shape())).into());
            }
            log::debug!("t-SNE input {}", volume_stem(&f));
            out.push((cat.dir_name().to_string(), v.data().to_vec()));
        }
    }
    Ok(out)
}

fn tsne(ctx: &mut Context, a: TsneArgs) -> CliResult<()> {
    if let Some(p) = a.perplexity {
        ctx.config.tsne.perplexity = p;
    }
    if let Some(i) = a.iterations {
        ctx.config.tsne.iterations = i;
    }
    if let Some(s) = a.seed {
        ctx.config.tsne.seed = s;
    }
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let pool = match a.pool {
        Some(p) => p,
        None => ctx.run.require(POOL, "synthesize")?,
    };
    let items = pool_nodules(&pool)?;
    let images: Vec<Vec<f32>> = items.iter().map(|(_, d)| d.clone()).collect();
    let y = tsne_embed(&images, &cfg.tsne)?;
    let points: Vec<TsnePoint> = y
        .iter()
        .zip(&items)
        .map(|(p, (cat, _))| TsnePoint {
            x: p[0],
            y: p[1],
            category: cat.clone(),
        })
        .collect();
    let stage = ctx.run.begin("tsne", "tsne")?;
    stage.write_text("points.csv", &tsne_csv(&points))?;
    stage.finish(cfg)?;
    print_json(&json!({ "points": points.len(), "csv": ctx.run.path("tsne/points.csv") }))
}

fn vtt_serve(ctx: &mut Context, a: VttServeArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        ctx.config.seeds.vtt = s;
    }
    ctx.config.validate()?;
    let pool_dir = match a.pool {
        Some(p) => p,
        None => ctx.run.require(POOL, "synthesize")?,
    };
    let pool = mcgan_core::vtt::ItemPool::load(&pool_dir)?;
    let log_dir = ctx.run.path(VTT_LOGS);
    crate::run::write_text(&ctx.run.path("vtt/config.json"), &ctx.config.to_pretty_json()?)?;
    let service = mcgan_core::vtt::VttService::open(pool, &log_dir, ctx.config.seeds.vtt)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Server(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Server(format!("cannot bind {}: {e}", a.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Server(e.to_string()))?;
        print_json(&json!({ "listening": format!("http://{addr}") }))?;
        crate::server::serve(listener, crate::server::router(service, a.static_dir.as_deref())).await
    })
}

fn vtt_report(ctx: &mut Context, a: VttReportArgs) -> CliResult<()> {
    let logs = ctx.run.require(VTT_LOGS, "vtt-serve")?;
    let responses = responses_from_logs(&logs)?;
    let tests: Vec<u8> = match a.test {
        Some(t) => vec![t],
        None => TEST_IDS.to_vec(),
    };
    let stage = ctx.run.begin("vtt-report", "vtt-report")?;
    let mut all = BTreeMap::new();
    for t in tests {
        let table = test_report(&responses, t)?;
        stage.write_json(&format!("test{t}.json"), &table)?;
        all.insert(t.to_string(), table);
    }
    stage.finish(&ctx.config)?;
    print_json(&all)
}
