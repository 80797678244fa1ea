//! Nodule taxonomy, dataset manifests, scan filtering and splitting.

use crate::conditioning::ConditionLabel;
use crate::volume::Box3;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttenuationClass {
    Solid,
    PartSolid,
    Ggn,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl AttenuationClass {
    pub const ALL: [AttenuationClass; 3] = [AttenuationClass::Solid, AttenuationClass::PartSolid, AttenuationClass::Ggn];

    pub fn as_str(self) -> &'static str {
        match self {
            AttenuationClass::Solid => "solid",
            AttenuationClass::PartSolid => "part_solid",
            AttenuationClass::Ggn => "ggn",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AttenuationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown size class '{s}'")))
    }
}

impl FromStr for AttenuationClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attenuation class '{s}'")))
    }
}

/// `≤ 10 mm` small, `(10, 20]` medium, `> 20` large.
pub fn classify_size(diameter_mm: f64) -> Result<SizeClass> {
    if !(diameter_mm > 0.0) || !diameter_mm.is_finite() {
        return Err(Error::InvalidArgument(format!("diameter must be positive, got {diameter_mm}")));
    }
    Ok(if diameter_mm <= 10.0 {
        SizeClass::Small
    } else if diameter_mm <= 20.0 {
        SizeClass::Medium
    } else {
        SizeClass::Large
    })
}

/// A nodule as stored inside a manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleRecord {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub diameter_mm: f64,
    pub size_class: SizeClass,
    pub attenuation_class: AttenuationClass,
}

impl NoduleRecord {
    pub fn label(&self) -> ConditionLabel {
        ConditionLabel::new(self.size_class, self.attenuation_class)
    }
}

/// A nodule annotation bound to its scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub diameter_mm: f64,
    pub size_class: SizeClass,
    pub attenuation_class: AttenuationClass,
}

impl NoduleAnnotation {
    pub fn new(
        scan_id: impl Into<String>,
        bbox: Box3,
        diameter_mm: f64,
        attenuation_class: AttenuationClass,
    ) -> Result<Self> {
        Ok(Self {
            scan_id: scan_id.into(),
            bbox,
            diameter_mm,
            size_class: classify_size(diameter_mm)?,
            attenuation_class,
        })
    }

    pub fn label(&self) -> ConditionLabel {
        ConditionLabel::new(self.size_class, self.attenuation_class)
    }

    pub fn record(&self) -> NoduleRecord {
        NoduleRecord {
            bbox: self.bbox,
            diameter_mm: self.diameter_mm,
            size_class: self.size_class,
            attenuation_class: self.attenuation_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub spacing_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub n_slices: Option<usize>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub nodules: Vec<NoduleRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_scan_id: Option<String>,
}

impl ManifestEntry {
    pub fn annotations(&self) -> Vec<NoduleAnnotation> {
        self.nodules
            .iter()
            .map(|n| NoduleAnnotation {
                scan_id: self.scan_id.clone(),
                bbox: n.bbox,
                diameter_mm: n.diameter_mm,
                size_class: n.size_class,
                attenuation_class: n.attenuation_class,
            })
            .collect()
    }
}

/// JSON array of scan entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Unique scan ids and nodule classes consistent with their diameters.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.scan_id.as_str()) {
                return Err(Error::Consistency(format!("scan '{}' listed twice", e.scan_id)));
            }
            for n in &e.nodules {
                let expected = classify_size(n.diameter_mm)?;
                if expected != n.size_class {
                    return Err(Error::Consistency(format!(
                        "scan '{}': {} mm nodule labelled {} (expected {})",
                        e.scan_id, n.diameter_mm, n.size_class, expected
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, scan_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.scan_id == scan_id)
    }

    pub fn with_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn annotations(&self) -> Vec<NoduleAnnotation> {
        self.entries.iter().flat_map(|e| e.annotations()).collect()
    }
}

/// Why a scan was rejected by [`filter_scans`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Thickness,
    Spacing,
    Slices,
    Metadata,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Thickness => "thickness",
            RejectReason::Spacing => "spacing",
            RejectReason::Slices => "slices",
            RejectReason::Metadata => "metadata",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub scan_id: String,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: DatasetManifest,
    pub rejected: Vec<Rejection>,
}

/// Acceptance thresholds for [`filter_scans`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    pub max_slice_thickness_mm: f64,
    pub min_pixel_spacing_mm: f64,
    pub max_pixel_spacing_mm: f64,
    pub max_slices: usize,
    pub target_slice_thickness_mm: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            max_slice_thickness_mm: 3.0,
            min_pixel_spacing_mm: 0.5,
            max_pixel_spacing_mm: 0.9,
            max_slices: 400,
            target_slice_thickness_mm: 1.0,
        }
    }
}

/// Depth after linear resampling to `target_dz`.
pub fn resampled_depth(n_slices: usize, dz: f64, target_dz: f64) -> usize {
    ((n_slices.saturating_sub(1)) as f64 * dz / target_dz).round() as usize + 1
}

pub fn filter_scans(manifest: &DatasetManifest) -> FilterOutcome {
    filter_scans_with(manifest, &FilterRules::default())
}

pub fn filter_scans_with(manifest: &DatasetManifest, rules: &FilterRules) -> FilterOutcome {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for e in &manifest.entries {
        match check_entry(e, rules) {
            None => kept.push(e.clone()),
            Some(reason) => rejected.push(Rejection {
                scan_id: e.scan_id.clone(),
                reason,
            }),
        }
    }
    FilterOutcome {
        kept: DatasetManifest { entries: kept },
        rejected,
    }
}

fn check_entry(e: &ManifestEntry, rules: &FilterRules) -> Option<RejectReason> {
    let (Some([dz, dy, dx]), Some(n)) = (e.spacing_mm, e.n_slices) else {
        return Some(RejectReason::Metadata);
    };
    if n == 0 || [dz, dy, dx].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Some(RejectReason::Metadata);
    }
    if dz > rules.max_slice_thickness_mm {
        return Some(RejectReason::Thickness);
    }
    let in_plane = rules.min_pixel_spacing_mm..=rules.max_pixel_spacing_mm;
    if !in_plane.contains(&dy) || !in_plane.contains(&dx) {
        return Some(RejectReason::Spacing);
    }
    if resampled_depth(n, dz, rules.target_slice_thickness_mm) > rules.max_slices {
        return Some(RejectReason::Slices);
    }
    None
}

/// How scans are distributed over train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    Ratios { train: f64, val: f64, test: f64 },
    Explicit { train: Vec<String>, val: Vec<String>, test: Vec<String> },
}

/// Assign every scan to one split. Scans with more than `nodule_cap` nodules
/// are routed to train under the ratio policy; explicit lists must respect
/// the cap themselves.
pub fn split_dataset(
    manifest: &DatasetManifest,
    policy: &SplitPolicy,
    nodule_cap: Option<usize>,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    match policy {
        SplitPolicy::Ratios { train, val, test } => {
            let r = [*train, *val, *test];
            if r.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("split ratios {r:?} must be non-negative and sum to 1")));
            }
            let n = out.entries.len();
            let capped = |e: &ManifestEntry| nodule_cap.is_some_and(|c| e.nodules.len() > c);
            let mut eligible: Vec<usize> = (0..n).filter(|&i| !capped(&out.entries[i])).collect();
            eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_val = ((n as f64) * val).round() as usize;
            let n_test = ((n as f64) * test).round() as usize;
            out.entries.iter_mut().for_each(|e| e.split = Some(Split::Train));
            let mut it = eligible.into_iter();
            for i in it.by_ref().take(n_val) {
                out.entries[i].split = Some(Split::Val);
            }
            for i in it.take(n_test) {
                out.entries[i].split = Some(Split::Test);
            }
        }
        SplitPolicy::Explicit { train, val, test } => {
            let mut assign: HashMap<&str, Split> = HashMap::new();
            for (ids, split) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
                for id in ids {
                    if assign.insert(id.as_str(), split).is_some() {
                        return Err(Error::InvalidArgument(format!("scan '{id}' listed in more than one split")));
                    }
                }
            }
            for e in &mut out.entries {
                let split = *assign
                    .get(e.scan_id.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("scan '{}' missing from the split lists", e.scan_id)))?;
                if split != Split::Train && nodule_cap.is_some_and(|c| e.nodules.len() > c) {
                    return Err(Error::InvalidArgument(format!(
                        "scan '{}' has {} nodules, above the val/test cap",
                        e.scan_id,
                        e.nodules.len()
                    )));
                }
                e.split = Some(split);
            }
            if assign.len() != out.entries.len() {
                return Err(Error::InvalidArgument("split lists name scans absent from the manifest".into()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, spacing: [f64; 3], n: usize, nodules: usize) -> ManifestEntry {
        let rec = NoduleRecord {
            bbox: Box3::new([0, 0, 0], [4, 4, 4]).unwrap(),
            diameter_mm: 4.0,
            size_class: SizeClass::Small,
            attenuation_class: AttenuationClass::Solid,
        };
        ManifestEntry {
            scan_id: id.into(),
            path: format!("{id}.json").into(),
            spacing_mm: Some(spacing),
            n_slices: Some(n),
            split: None,
            nodules: vec![rec; nodules],
            synthetic: false,
            source_scan_id: None,
        }
    }

    #[test]
    fn size_boundaries() {
        assert_eq!(classify_size(5.0).unwrap(), SizeClass::Small);
        assert_eq!(classify_size(10.0).unwrap(), SizeClass::Small);
        assert_eq!(classify_size(10.01).unwrap(), SizeClass::Medium);
        assert_eq!(classify_size(20.0).unwrap(), SizeClass::Medium);
        assert_eq!(classify_size(25.0).unwrap(), SizeClass::Large);
        assert!(classify_size(0.0).is_err());
        assert!(classify_size(-3.0).is_err());
    }

    #[test]
    fn filter_examples() {
        let m = DatasetManifest {
            entries: vec![
                entry("ok", [1.0, 0.7, 0.7], 300, 0),
                entry("thick", [5.0, 0.7, 0.7], 50, 0),
                entry("long", [2.0, 0.7, 0.7], 201, 0),
                entry("coarse", [1.0, 0.95, 0.7], 100, 0),
                ManifestEntry {
                    spacing_mm: None,
                    ..entry("blank", [1.0; 3], 1, 0)
                },
            ],
        };
        let out = filter_scans(&m);
        assert_eq!(out.kept.entries.len(), 1);
        assert_eq!(out.kept.entries[0].scan_id, "ok");
        let reasons: Vec<_> = out.rejected.iter().map(|r| (r.scan_id.as_str(), r.reason.as_str())).collect();
        assert_eq!(
            reasons,
            vec![("thick", "thickness"), ("long", "slices"), ("coarse", "spacing"), ("blank", "metadata")]
        );
        assert_eq!(filter_scans(&out.kept).kept, out.kept);
    }

    #[test]
    fn split_policies() {
        let mut entries: Vec<_> = (0..20).map(|i| entry(&format!("s{i}"), [1.0, 0.7, 0.7], 100, 1)).collect();
        entries[3] = entry("s3", [1.0, 0.7, 0.7], 100, 12);
        let m = DatasetManifest { entries };
        let policy = SplitPolicy::Ratios { train: 0.5, val: 0.25, test: 0.25 };
        let a = split_dataset(&m, &policy, Some(5), 7).unwrap();
        assert_eq!(a, split_dataset(&m, &policy, Some(5), 7).unwrap());
        assert_eq!(a.get("s3").unwrap().split, Some(Split::Train));
        assert_eq!(a.with_split(Split::Val).len(), 5);
        assert_eq!(a.with_split(Split::Test).len(), 5);
        let all_train = split_dataset(&m, &SplitPolicy::Ratios { train: 1.0, val: 0.0, test: 0.0 }, None, 1).unwrap();
        assert!(all_train.entries.iter().all(|e| e.split == Some(Split::Train)));
        let bad = SplitPolicy::Ratios { train: 0.5, val: 0.2, test: 0.2 };
        assert!(matches!(split_dataset(&m, &bad, None, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn explicit_split_must_cover_every_scan() {
        let m = DatasetManifest { entries: vec![entry("a", [1.0, 0.7, 0.7], 9, 0), entry("b", [1.0, 0.7, 0.7], 9, 0)] };
        let ok = SplitPolicy::Explicit { train: vec!["a".into()], val: vec!["b".into()], test: vec![] };
        let out = split_dataset(&m, &ok, None, 0).unwrap();
        assert_eq!(out.get("b").unwrap().split, Some(Split::Val));
        let missing = SplitPolicy::Explicit { train: vec!["a".into()], val: vec![], test: vec![] };
        assert!(split_dataset(&m, &missing, None, 0).is_err());
    }

    #[test]
    fn manifest_json_shape() {
        let mut e = entry("a", [1.0, 0.7, 0.7], 9, 1);
        e.split = Some(Split::Train);
        let m = DatasetManifest { entries: vec![e] };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert!(v.is_array());
        assert_eq!(v[0]["nodules"][0]["box"], serde_json::json!([0, 0, 0, 4, 4, 4]));
        assert_eq!(v[0]["nodules"][0]["size_class"], "small");
        assert_eq!(v[0]["split"], "train");
        let back: DatasetManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn inconsistent_class_is_rejected() {
        let mut e = entry("a", [1.0, 0.7, 0.7], 9, 1);
        e.nodules[0].diameter_mm = 15.0;
        assert!(matches!(DatasetManifest::new(vec![e]), Err(Error::Consistency(_))));
    }

    proptest! {
        #[test]
        fn classify_is_monotone(a in 0.01f64..60.0, b in 0.01f64..60.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_size(lo).unwrap() <= classify_size(hi).unwrap());
        }

        #[test]
        fn filter_is_idempotent(specs in proptest::collection::vec((0.3f64..6.0, 0.3f64..1.2, 1usize..600), 0..12)) {
            let m = DatasetManifest {
                entries: specs.iter().enumerate().map(|(i, (dz, px, n))| entry(&format!("s{i}"), [*dz, *px, *px], *n, 0)).collect(),
            };
            let once = filter_scans(&m).kept;
            prop_assert_eq!(filter_scans(&once).kept, once);
        }
    }
}
