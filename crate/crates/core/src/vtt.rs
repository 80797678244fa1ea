//! Rating-study service: item pools, blinded sessions and the event log.
//!
//! A session shows 50 real and 50 synthetic images of one kind in a seeded
//! random order, one at a time and forward only. Every state change is
//! appended to `<log_dir>/<session_id>.ndjson`, and opening a service on an
//! existing log directory replays those files.

use crate::evaluation::{vtt_statistics, Truth, VttResponse, VttTable, SESSION_ITEMS};
use crate::io::{read_volume, volume_stem, VolumeFormat};
use crate::training::derive_seed;
use crate::volume::Volume;
use crate::{Error, Result};
use base64::Engine as _;
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const TEST_IDS: [u8; 4] = [1, 2, 3, 4];
const PER_CLASS: usize = SESSION_ITEMS / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    /// 32³ nodule crops.
    Nodule,
    /// 64³ volumes of interest.
    Voi,
}

impl ImageKind {
    pub fn side(self) -> usize {
        match self {
            ImageKind::Nodule => 32,
            ImageKind::Voi => 64,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            ImageKind::Nodule => "nodule",
            ImageKind::Voi => "voi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolCategory {
    Real,
    SyntheticNoL1,
    SyntheticWithL1,
}

impl PoolCategory {
    pub const ALL: [PoolCategory; 3] = [PoolCategory::Real, PoolCategory::SyntheticNoL1, PoolCategory::SyntheticWithL1];

    pub fn dir_name(self) -> &'static str {
        match self {
            PoolCategory::Real => "real",
            PoolCategory::SyntheticNoL1 => "synthetic_no_l1",
            PoolCategory::SyntheticWithL1 => "synthetic_with_l1",
        }
    }

    pub fn truth(self) -> Truth {
        match self {
            PoolCategory::Real => Truth::Real,
            _ => Truth::Synthetic,
        }
    }
}

/// Image kind and synthetic source shown in test `test_id`.
pub fn test_contents(test_id: u8) -> Result<(ImageKind, PoolCategory)> {
    Ok(match test_id {
        1 => (ImageKind::Nodule, PoolCategory::SyntheticNoL1),
        2 => (ImageKind::Nodule, PoolCategory::SyntheticWithL1),
        3 => (ImageKind::Voi, PoolCategory::SyntheticNoL1),
        4 => (ImageKind::Voi, PoolCategory::SyntheticWithL1),
        _ => return Err(Error::InvalidArgument(format!("test id {test_id} is not one of 1-4"))),
    })
}

/// The three centre planes of a cube as 8-bit grayscale PNGs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub axial: Vec<u8>,
    pub coronal: Vec<u8>,
    pub sagittal: Vec<u8>,
    /// Intensities mapped linearly onto 0..=255, clamped outside.
    pub window: (f32, f32),
}

/// Centre-plane pixels: axial `[y][x]` at `z = nz/2`, coronal `[z][x]` at
/// `y = ny/2`, sagittal `[z][y]` at `x = nx/2`.
pub fn center_slices(volume: &Volume) -> [(usize, usize, Vec<f32>); 3] {
    let [nz, ny, nx] = volume.shape();
    let (cz, cy, cx) = (nz / 2, ny / 2, nx / 2);
    let axial = (0..ny).flat_map(|y| (0..nx).map(move |x| (y, x))).map(|(y, x)| volume.get(cz, y, x)).collect();
    let coronal = (0..nz).flat_map(|z| (0..nx).map(move |x| (z, x))).map(|(z, x)| volume.get(z, cy, x)).collect();
    let sagittal = (0..nz).flat_map(|z| (0..ny).map(move |y| (z, y))).map(|(z, y)| volume.get(z, y, cx)).collect();
    [(nx, ny, axial), (nx, nz, coronal), (ny, nz, sagittal)]
}

pub fn window_to_u8(v: f32, window: (f32, f32)) -> u8 {
    let (lo, hi) = window;
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::InvalidArgument(format!("png encoding failed: {e}"));
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(pixels).map_err(to_err)?;
    w.finish().map_err(to_err)?;
    Ok(out)
}

/// Render with the volume's own normalised intensity range as the window.
pub fn render_views(volume: &Volume) -> Result<RenderedViews> {
    let window = volume.intensity_range();
    let [a, c, s] = center_slices(volume).map(|(w, h, px)| {
        let bytes: Vec<u8> = px.iter().map(|&v| window_to_u8(v, window)).collect();
        encode_png(w, h, &bytes)
    });
    Ok(RenderedViews {
        axial: a?,
        coronal: c?,
        sagittal: s?,
        window,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolItem {
    /// Opaque id; reveals neither category nor source.
    pub item_id: String,
    pub kind: ImageKind,
    pub category: PoolCategory,
    pub source: String,
    pub views: RenderedViews,
}

fn opaque_id(kind: ImageKind, category: PoolCategory, source: &str) -> String {
    let digest = Sha256::digest(format!("{}/{}/{source}", kind.dir_name(), category.dir_name()));
    hex::encode(&digest[..8])
}

#[derive(Clone, Debug, Default)]
pub struct ItemPool {
    items: Vec<PoolItem>,
    by_id: BTreeMap<String, usize>,
}

impl ItemPool {
    /// Build from in-memory cubes; each must have the side of its kind.
    pub fn from_volumes(entries: Vec<(ImageKind, PoolCategory, Volume)>) -> Result<Self> {
        let mut pool = Self::default();
        for (kind, category, volume) in entries {
            let side = kind.side();
            if volume.shape() != [side; 3] {
                return Err(Error::InvalidArgument(format!(
                    "{} item '{}' has shape {:?}, expected {side}³",
                    kind.dir_name(),
                    volume.scan_id,
                    volume.shape()
                )));
            }
            let item_id = opaque_id(kind, category, &volume.scan_id);
            if pool.by_id.contains_key(&item_id) {
                return Err(Error::Consistency(format!(
                    "duplicate pool item '{}' in {}/{}",
                    volume.scan_id,
                    kind.dir_name(),
                    category.dir_name()
                )));
            }
            pool.by_id.insert(item_id.clone(), pool.items.len());
            pool.items.push(PoolItem {
                item_id,
                kind,
                category,
                views: render_views(&volume)?,
                source: volume.scan_id,
            });
        }
        Ok(pool)
    }

    /// Load `<dir>/{nodule,voi}/{real,synthetic_no_l1,synthetic_with_l1}/*`;
    /// missing subdirectories are empty categories.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("item pool directory {}", dir.display())));
        }
        let mut entries = Vec::new();
        for kind in [ImageKind::Nodule, ImageKind::Voi] {
            for category in PoolCategory::ALL {
                let sub = dir.join(kind.dir_name()).join(category.dir_name());
                if !sub.is_dir() {
                    continue;
                }
                let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
                    .map_err(|e| Error::io(&sub, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        // raw volumes are opened through their JSON sidecar
                        VolumeFormat::from_path(p).is_ok() && p.extension().map_or(true, |e| e != "raw")
                    })
                    .collect();
                files.sort();
                for f in files {
                    let mut v = read_volume(&f)?;
                    v.scan_id = volume_stem(&f);
                    entries.push((kind, category, v));
                }
            }
        }
        Self::from_volumes(entries)
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&PoolItem> {
        self.by_id.get(item_id).map(|&i| &self.items[i])
    }

    pub fn count(&self, kind: ImageKind, category: PoolCategory) -> usize {
        self.items.iter().filter(|i| i.kind == kind && i.category == category).count()
    }

    fn ids(&self, kind: ImageKind, category: PoolCategory) -> Vec<&str> {
        self.items
            .iter()
            .filter(|i| i.kind == kind && i.category == category)
            .map(|i| i.item_id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedItem {
    pub item_id: String,
    pub truth: Truth,
}

/// One line of a session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Create {
        session_id: String,
        rater_id: String,
        test_id: u8,
        seed: u64,
        items: Vec<LoggedItem>,
        timestamp: u64,
    },
    Serve {
        session_id: String,
        item_id: String,
        cursor: usize,
        timestamp: u64,
    },
    Submit {
        session_id: String,
        item_id: String,
        truth: Truth,
        answer: Truth,
        timestamp: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub rater_id: String,
    pub test_id: u8,
    pub status: SessionStatus,
    pub progress: Progress,
}

/// What a rater receives for one item: no truth, no source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPayload {
    pub item_id: String,
    /// Base64-encoded PNG.
    pub axial_png: String,
    pub coronal_png: String,
    pub sagittal_png: String,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Active(ItemPayload),
    Completed { progress: Progress },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub item_id: String,
    pub status: SessionStatus,
    pub progress: Progress,
}

#[derive(Clone, Debug)]
struct Session {
    id: String,
    rater_id: String,
    test_id: u8,
    items: Vec<LoggedItem>,
    responses: Vec<VttResponse>,
}

impl Session {
    fn progress(&self) -> Progress {
        Progress {
            answered: self.responses.len(),
            total: self.items.len(),
        }
    }

    fn status(&self) -> SessionStatus {
        if self.responses.len() == self.items.len() {
            SessionStatus::Completed
        } else {
            SessionStatus::Active
        }
    }

    fn info(&self) -> SessionInfo {
        SessionInfo {
            session_id: self.id.clone(),
            rater_id: self.rater_id.clone(),
            test_id: self.test_id,
            status: self.status(),
            progress: self.progress(),
        }
    }

    fn apply_submit(&mut self, item_id: &str, answer: Truth, timestamp: u64) -> Result<&VttResponse> {
        if let Some(prev) = self.responses.iter().find(|r| r.item_id == item_id) {
            return Err(Error::Sequencing(format!(
                "item {item_id} already answered in session {} (answer kept: {})",
                self.id, prev.answer
            )));
        }
        let Some(current) = self.items.get(self.responses.len()) else {
            return Err(Error::Sequencing(format!("session {} is already completed", self.id)));
        };
        if current.item_id != item_id {
            return Err(Error::Sequencing(format!(
                "session {} expects an answer for item {}, got {item_id}",
                self.id, current.item_id
            )));
        }
        self.responses.push(VttResponse {
            session_id: self.id.clone(),
            rater_id: self.rater_id.clone(),
            test_id: self.test_id,
            item_id: item_id.to_string(),
            truth: current.truth,
            answer,
            timestamp,
        });
        Ok(self.responses.last().expect("just pushed"))
    }
}

fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Events of one session log. A final line cut short by a crash is dropped.
pub fn read_session_log(path: &Path) -> Result<Vec<SessionEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: ignoring truncated final event", path.display());
            }
            Err(e) => return Err(Error::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(events)
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ndjson"))
        .collect();
    files.sort();
    Ok(files)
}

fn replay(path: &Path) -> Result<Option<Session>> {
    let mut events = read_session_log(path)?.into_iter();
    let Some(first) = events.next() else {
        return Ok(None);
    };
    let SessionEvent::Create {
        session_id,
        rater_id,
        test_id,
        items,
        ..
    } = first
    else {
        return Err(Error::format(path, "session log does not open with a create event"));
    };
    let mut session = Session {
        id: session_id,
        rater_id,
        test_id,
        items,
        responses: Vec::new(),
    };
    for e in events {
        match e {
            SessionEvent::Create { .. } => return Err(Error::format(path, "second create event")),
            SessionEvent::Serve { .. } => {}
            SessionEvent::Submit {
                session_id,
                item_id,
                truth,
                answer,
                timestamp,
            } => {
                if session_id != session.id {
                    return Err(Error::format(path, format!("event for foreign session {session_id}")));
                }
                let r = session.apply_submit(&item_id, answer, timestamp).map_err(|e| Error::format(path, e.to_string()))?;
                if r.truth != truth {
                    return Err(Error::format(path, format!("logged truth of {item_id} disagrees with the session")));
                }
            }
        }
    }
    Ok(Some(session))
}

/// All submitted responses recorded under `log_dir`.
pub fn responses_from_logs(log_dir: &Path) -> Result<Vec<VttResponse>> {
    let mut out = Vec::new();
    for f in log_files(log_dir)? {
        if let Some(s) = replay(&f)? {
            out.extend(s.responses);
        }
    }
    Ok(out)
}

/// Per-rater table for one test; sessions of other tests are ignored.
pub fn test_report(responses: &[VttResponse], test_id: u8) -> Result<VttTable> {
    test_contents(test_id)?;
    let own: Vec<VttResponse> = responses.iter().filter(|r| r.test_id == test_id).cloned().collect();
    Ok(vtt_statistics(&own))
}

pub type Clock = Box<dyn FnMut() -> u64 + Send>;

/// Session store over an item pool. Callers serialise access (one writer).
pub struct VttService {
    pool: ItemPool,
    log_dir: PathBuf,
    seed: u64,
    sessions: BTreeMap<String, Session>,
    clock: Clock,
}

impl VttService {
    /// Open on `log_dir`, restoring every session logged there.
    pub fn open(pool: ItemPool, log_dir: &Path, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(log_dir).map_err(|e| Error::io(log_dir, e))?;
        let mut sessions = BTreeMap::new();
        for f in log_files(log_dir)? {
            if let Some(s) = replay(&f)? {
                if s.items.iter().any(|i| pool.get(&i.item_id).is_none()) {
                    return Err(Error::Consistency(format!(
                        "session {} refers to items missing from the pool",
                        s.id
                    )));
                }
                sessions.insert(s.id.clone(), s);
            }
        }
        Ok(Self {
            pool,
            log_dir: log_dir.to_path_buf(),
            seed,
            sessions,
            clock: Box::new(now_millis),
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn pool(&self) -> &ItemPool {
        &self.pool
    }

    fn append(&self, session_id: &str, event: &SessionEvent) -> Result<()> {
        let path = self.log_dir.join(format!("{session_id}.ndjson"));
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo> {
        Ok(self.session(id)?.info())
    }

    /// Start test `test_id` for a rater, or resume their unfinished session
    /// of that test. Tests are taken in ascending order: test `k + 1` needs a
    /// completed test `k`.
    pub fn create_session(&mut self, rater_id: &str, test_id: u8) -> Result<SessionInfo> {
        let (kind, synthetic) = test_contents(test_id)?;
        if rater_id.trim().is_empty() {
            return Err(Error::InvalidArgument("rater id must not be empty".into()));
        }
        let mine = || self.sessions.values().filter(|s| s.rater_id == rater_id);
        if let Some(s) = mine().find(|s| s.test_id == test_id && s.status() == SessionStatus::Active) {
            return Ok(s.info());
        }
        if test_id > 1 && !mine().any(|s| s.test_id == test_id - 1 && s.status() == SessionStatus::Completed) {
            return Err(Error::Sequencing(format!(
                "rater {rater_id} must complete test {} before test {test_id}",
                test_id - 1
            )));
        }
        let real = self.pool.ids(kind, PoolCategory::Real);
        let synth = self.pool.ids(kind, synthetic);
        if real.len() < PER_CLASS || synth.len() < PER_CLASS {
            return Err(Error::Capacity(format!(
                "test {test_id} needs {PER_CLASS} real and {PER_CLASS} synthetic {} items; pool has {} and {}",
                kind.dir_name(),
                real.len(),
                synth.len()
            )));
        }
        let ordinal = mine().filter(|s| s.test_id == test_id).count();
        let digest = Sha256::digest(format!("{}:{rater_id}:{test_id}:{ordinal}", self.seed));
        let session_id = hex::encode(&digest[..8]);
        let seed = derive_seed(self.seed, &[u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes"))]);
        let items = draw_items(&real, &synth, seed);

        let event = SessionEvent::Create {
            session_id: session_id.clone(),
            rater_id: rater_id.to_string(),
            test_id,
            seed,
            items: items.clone(),
            timestamp: (self.clock)(),
        };
        self.append(&session_id, &event)?;
        let s = Session {
            id: session_id.clone(),
            rater_id: rater_id.to_string(),
            test_id,
            items,
            responses: Vec::new(),
        };
        let info = s.info();
        self.sessions.insert(session_id, s);
        Ok(info)
    }

    /// The item at the cursor; repeated calls return the same item until an
    /// answer is submitted.
    pub fn next_item(&mut self, session_id: &str) -> Result<NextItem> {
        let s = self.session(session_id)?;
        let progress = s.progress();
        let Some(item) = s.items.get(s.responses.len()) else {
            return Ok(NextItem::Completed { progress });
        };
        let pooled = self
            .pool
            .get(&item.item_id)
            .ok_or_else(|| Error::Consistency(format!("item {} missing from the pool", item.item_id)))?;
        let b64 = |bytes: &[u8]| base64::engine::general_purpose::STANDARD.encode(bytes);
        let payload = ItemPayload {
            item_id: item.item_id.clone(),
            axial_png: b64(&pooled.views.axial),
            coronal_png: b64(&pooled.views.coronal),
            sagittal_png: b64(&pooled.views.sagittal),
            progress,
        };
        let event = SessionEvent::Serve {
            session_id: session_id.to_string(),
            item_id: item.item_id.clone(),
            cursor: progress.answered,
            timestamp: (self.clock)(),
        };
        self.append(session_id, &event)?;
        Ok(NextItem::Active(payload))
    }

    /// Record an answer for the current item and advance the cursor.
    pub fn submit_answer(&mut self, session_id: &str, item_id: &str, answer: Truth) -> Result<SubmitAck> {
        let timestamp = (self.clock)();
        let s = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let mut trial = s.clone();
        let r = trial.apply_submit(item_id, answer, timestamp)?;
        let event = SessionEvent::Submit {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            truth: r.truth,
            answer,
            timestamp,
        };
        self.append(session_id, &event)?;
        let ack = SubmitAck {
            item_id: item_id.to_string(),
            status: trial.status(),
            progress: trial.progress(),
        };
        self.sessions.insert(session_id.to_string(), trial);
        Ok(ack)
    }

    pub fn responses(&self) -> Vec<VttResponse> {
        self.sessions.values().flat_map(|s| s.responses.iter().cloned()).collect()
    }

    pub fn report(&self, test_id: u8) -> Result<VttTable> {
        test_report(&self.responses(), test_id)
    }
}

/// 50 real and 50 synthetic ids in a seeded random order.
fn draw_items(real: &[&str], synthetic: &[&str], seed: u64) -> Vec<LoggedItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(SESSION_ITEMS);
    for (ids, truth) in [(real, Truth::Real), (synthetic, Truth::Synthetic)] {
        let mut picked = sample(&mut rng, ids.len(), PER_CLASS).into_vec();
        picked.sort_unstable();
        items.extend(picked.into_iter().map(|i| LoggedItem {
            item_id: ids[i].to_string(),
            truth,
        }));
    }
    items.shuffle(&mut rng);
    items
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cube(id: &str, side: usize, value: f32) -> Volume {
        let mut v = Volume::filled(id, [side; 3], [1.0; 3], -1.0).unwrap();
        let n = v.len();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = value * (i as f32 / n as f32);
        }
        v
    }

    fn pool(real: usize, no_l1: usize, with_l1: usize, kinds: &[ImageKind]) -> ItemPool {
        let mut entries = Vec::new();
        for &kind in kinds {
            for (cat, n) in [
                (PoolCategory::Real, real),
                (PoolCategory::SyntheticNoL1, no_l1),
                (PoolCategory::SyntheticWithL1, with_l1),
            ] {
                for i in 0..n {
                    entries.push((kind, cat, cube(&format!("{}{i}", cat.dir_name()), kind.side(), 0.5)));
                }
            }
        }
        ItemPool::from_volumes(entries).unwrap()
    }

    fn fixed_clock() -> Clock {
        let mut t = 1_000;
        Box::new(move || {
            t += 1;
            t
        })
    }

    fn service(dir: &Path, p: ItemPool) -> VttService {
        VttService::open(p, dir, 9).unwrap().with_clock(fixed_clock())
    }

    fn answer_all(svc: &mut VttService, id: &str, mut pick: impl FnMut(usize) -> Truth) {
        for k in 0..SESSION_ITEMS {
            let NextItem::Active(item) = svc.next_item(id).unwrap() else { panic!("ended early") };
            svc.submit_answer(id, &item.item_id, pick(k)).unwrap();
        }
    }

    #[test]
    fn center_planes_and_window() {
        let mut v = Volume::filled("c", [4, 6, 8], [1.0; 3], -1.0).unwrap();
        let idx = v.index(2, 3, 4);
        v.data_mut()[idx] = 1.0;
        let [(aw, ah, a), (cw, ch, c), (sw, sh, s)] = center_slices(&v);
        assert_eq!((aw, ah, cw, ch, sw, sh), (8, 6, 8, 4, 6, 4));
        assert_eq!(a[3 * 8 + 4], 1.0);
        assert_eq!(c[2 * 8 + 4], 1.0);
        assert_eq!(s[2 * 6 + 3], 1.0);
        assert_eq!(a.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(window_to_u8(-1.0, (-1.0, 1.0)), 0);
        assert_eq!(window_to_u8(0.0, (-1.0, 1.0)), 128);
        assert_eq!(window_to_u8(3.0, (-1.0, 1.0)), 255);

        let views = render_views(&v).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(views.axial.clone()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (8, 6));
        assert_eq!(info.color_type, png::ColorType::Grayscale);
        assert_eq!(info.bit_depth, png::BitDepth::Eight);
        assert_eq!(buf[3 * 8 + 4], 255);
        assert_eq!(buf[0], 0);
        assert_eq!(views.window, (-1.0, 1.0));
    }

    #[test]
    fn sessions_are_balanced_seeded_and_unique() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(60, 55, 0, &[ImageKind::Nodule]);
        let mut svc = service(dir.path(), p.clone());
        let info = svc.create_session("r1", 1).unwrap();
        let items = svc.sessions[&info.session_id].items.clone();
        assert_eq!(items.len(), 100);
        assert_eq!(items.iter().filter(|i| i.truth == Truth::Real).count(), 50);
        let ids: BTreeSet<_> = items.iter().map(|i| &i.item_id).collect();
        assert_eq!(ids.len(), 100);
        for i in &items {
            assert_eq!(p.get(&i.item_id).unwrap().category.truth(), i.truth);
        }
        // same seed and pool elsewhere: same permutation
        let dir2 = tempfile::tempdir().unwrap();
        let mut svc2 = service(dir2.path(), p);
        let info2 = svc2.create_session("r1", 1).unwrap();
        assert_eq!(info2.session_id, info.session_id);
        assert_eq!(svc2.sessions[&info2.session_id].items, items);
        // another rater gets another order
        let other = svc.create_session("r2", 1).unwrap();
        assert_ne!(svc.sessions[&other.session_id].items, items);
    }

    #[test]
    fn capacity_and_argument_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut svc = service(dir.path(), pool(50, 49, 50, &[ImageKind::Nodule]));
        assert!(matches!(svc.create_session("r", 1), Err(Error::Capacity(_))));
        assert!(matches!(svc.create_session("r", 5), Err(Error::InvalidArgument(_))));
        assert!(matches!(svc.create_session("", 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(svc.next_item("nope"), Err(Error::NotFound(_))));
        let bad = ItemPool::from_volumes(vec![(ImageKind::Voi, PoolCategory::Real, cube("x", 32, 0.0))]);
        assert!(bad.is_err());
    }

    #[test]
    fn forward_only_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let mut svc = service(dir.path(), pool(50, 50, 50, &[ImageKind::Nodule]));
        let id = svc.create_session("r", 1).unwrap().session_id;
        let NextItem::Active(a) = svc.next_item(&id).unwrap() else { panic!() };
        let NextItem::Active(b) = svc.next_item(&id).unwrap() else { panic!() };
        assert_eq!(a, b);
        assert_eq!(a.item_id, svc.sessions[&id].items[0].item_id);
        assert_eq!(a.progress, Progress { answered: 0, total: 100 });

        let second = svc.sessions[&id].items[1].item_id.clone();
        assert!(matches!(svc.submit_answer(&id, &second, Truth::Real), Err(Error::Sequencing(_))));
        let ack = svc.submit_answer(&id, &a.item_id, Truth::Synthetic).unwrap();
        assert_eq!(ack.progress.answered, 1);
        // resubmission rejected; stored answer unchanged
        assert!(matches!(svc.submit_answer(&id, &a.item_id, Truth::Real), Err(Error::Sequencing(_))));
        assert_eq!(svc.responses()[0].answer, Truth::Synthetic);
        assert_eq!(svc.responses().len(), 1);

        // unfinished session is resumed, not duplicated
        assert_eq!(svc.create_session("r", 1).unwrap().session_id, id);
        answer_all_rest(&mut svc, &id);
        assert_eq!(svc.session_info(&id).unwrap().status, SessionStatus::Completed);
        assert!(matches!(svc.next_item(&id).unwrap(), NextItem::Completed { .. }));
        assert!(matches!(svc.submit_answer(&id, &a.item_id, Truth::Real), Err(Error::Sequencing(_))));
    }

    fn answer_all_rest(svc: &mut VttService, id: &str) {
        while let NextItem::Active(item) = svc.next_item(id).unwrap() {
            svc.submit_answer(id, &item.item_id, Truth::Real).unwrap();
        }
    }

    #[test]
    fn tests_run_in_ascending_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut svc = service(dir.path(), pool(50, 50, 50, &[ImageKind::Nodule, ImageKind::Voi]));
        assert!(matches!(svc.create_session("r", 2), Err(Error::Sequencing(_))));
        let t1 = svc.create_session("r", 1).unwrap().session_id;
        assert!(matches!(svc.create_session("r", 2), Err(Error::Sequencing(_))));
        answer_all(&mut svc, &t1, |_| Truth::Real);
        let t2 = svc.create_session("r", 2).unwrap().session_id;
        answer_all(&mut svc, &t2, |_| Truth::Real);
        assert!(matches!(svc.create_session("r", 4), Err(Error::Sequencing(_))));
        assert!(svc.create_session("r", 3).is_ok());
        assert!(matches!(svc.create_session("q", 3), Err(Error::Sequencing(_))));
    }

    #[test]
    fn payloads_carry_no_truth() {
        let dir = tempfile::tempdir().unwrap();
        let mut svc = service(dir.path(), pool(50, 50, 50, &[ImageKind::Nodule]));
        let id = svc.create_session("r", 1).unwrap().session_id;
        let next = serde_json::to_value(svc.next_item(&id).unwrap()).unwrap();
        let keys: BTreeSet<&str> = next.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            BTreeSet::from(["status", "item_id", "axial_png", "coronal_png", "sagittal_png", "progress"])
        );
        let item_id = next["item_id"].as_str().unwrap();
        let pooled = svc.pool().get(item_id).unwrap();
        assert!(!item_id.contains(&pooled.source));
        assert!(!item_id.contains("real") && !item_id.contains("synthetic"));
    }

    #[test]
    fn persisted_log_replays_to_the_same_report() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(50, 50, 50, &[ImageKind::Nodule]);
        let mut svc = service(dir.path(), p.clone());
        assert!(svc.report(1).unwrap().rows.is_empty());
        let a = svc.create_session("r1", 1).unwrap().session_id;
        answer_all(&mut svc, &a, |k| if k % 3 == 0 { Truth::Real } else { Truth::Synthetic });
        let b = svc.create_session("r2", 1).unwrap().session_id;
        answer_all(&mut svc, &b, |_| Truth::Synthetic);
        let c = svc.create_session("r3", 1).unwrap().session_id;
        answer_all_rest_partial(&mut svc, &c, 10);

        let live = svc.report(1).unwrap();
        assert_eq!(live.rows.len(), 2);
        assert_eq!(live.incomplete_sessions, vec![c.clone()]);
        assert_eq!(live.rows[1].accuracy_percent(), 50);
        let persisted = test_report(&responses_from_logs(dir.path()).unwrap(), 1).unwrap();
        assert_eq!(persisted, live);

        // reopen and continue where the log stopped
        let mut reopened = service(dir.path(), p);
        assert_eq!(reopened.session_info(&c).unwrap().progress.answered, 10);
        answer_all_rest(&mut reopened, &c);
        assert_eq!(reopened.report(1).unwrap().rows.len(), 3);
    }

    fn answer_all_rest_partial(svc: &mut VttService, id: &str, n: usize) {
        for _ in 0..n {
            let NextItem::Active(item) = svc.next_item(id).unwrap() else { panic!() };
            svc.submit_answer(id, &item.item_id, Truth::Real).unwrap();
        }
    }

    #[test]
    fn truncated_final_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut svc = service(dir.path(), pool(50, 50, 50, &[ImageKind::Nodule]));
        let id = svc.create_session("r", 1).unwrap().session_id;
        answer_all_rest_partial(&mut svc, &id, 3);
        let path = dir.path().join(format!("{id}.ndjson"));
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"submit\",\"sess").unwrap();
        assert_eq!(responses_from_logs(dir.path()).unwrap().len(), 3);
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(responses_from_logs(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn pool_loads_from_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("nodule").join("real");
        crate::io::write_volume(&sub.join("a.json"), &cube("a", 32, 0.3)).unwrap();
        crate::io::write_volume(&sub.join("b.nii.gz"), &cube("b", 32, 0.1)).unwrap();
        let p = ItemPool::load(dir.path()).unwrap();
        assert_eq!(p.items().len(), 2);
        assert_eq!(p.count(ImageKind::Nodule, PoolCategory::Real), 2);
        assert_eq!(p.items()[0].source, "a");
        assert!(matches!(ItemPool::load(&dir.path().join("missing")), Err(Error::NotFound(_))));
    }
}
