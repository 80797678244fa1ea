//! Detection matching, FROC/CPM scoring, t-SNE export and Visual Turing Test
//! statistics.

mod tsne;
mod vtt;

pub use tsne::{tsne_embed, tsne_csv, TsneConfig, TsnePoint};
pub use vtt::{vtt_statistics, Truth, VttResponse, VttRow, VttTable, SESSION_ITEMS};

use crate::dataset::{AttenuationClass, NoduleRecord, SizeClass};
use crate::detector::Detection;
use crate::volume::{iou, Box3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const DEFAULT_MATCH_IOU: f64 = 0.25;

/// FP-per-scan budgets averaged by CPM.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection (input order): true positive?
    pub is_tp: Vec<bool>,
    /// Per detection: index of the matched ground truth.
    pub assigned: Vec<Option<usize>>,
    pub gt_hit: Vec<bool>,
}

/// Detection indices by descending score; ties keep input order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching in descending score order: each detection takes the
/// highest-IoU unmatched ground truth with IoU ≥ `iou_threshold`.
pub fn match_detections(boxes: &[Box3], scores: &[f64], gts: &[Box3], iou_threshold: f64) -> MatchResult {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut is_tp = vec![false; boxes.len()];
    let mut assigned = vec![None; boxes.len()];
    let mut gt_hit = vec![false; gts.len()];
    for d in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_hit[g] {
                continue;
            }
            let v = iou(&boxes[d], gt);
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_hit[g] = true;
            is_tp[d] = true;
            assigned[d] = Some(g);
        }
    }
    MatchResult { is_tp, assigned, gt_hit }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<FrocPoint>,
    pub n_scans: usize,
    pub n_gts: usize,
}

fn group_detections<'a>(
    dets: &'a [Detection],
    scans: &BTreeMap<String, Vec<Box3>>,
) -> Result<BTreeMap<&'a str, Vec<&'a Detection>>> {
    let mut by_scan: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        if !scans.contains_key(&d.scan_id) {
            return Err(Error::Consistency(format!("detection for unknown scan '{}'", d.scan_id)));
        }
        by_scan.entry(d.scan_id.as_str()).or_default().push(d);
    }
    Ok(by_scan)
}

/// Sweep every distinct detection score. `gts` lists every evaluated scan,
/// including scans without nodules.
pub fn froc(dets: &[Detection], gts: &BTreeMap<String, Vec<Box3>>, iou_threshold: f64) -> Result<FrocCurve> {
    let n_scans = gts.len();
    let n_gts: usize = gts.values().map(Vec::len).sum();
    if n_scans == 0 || n_gts == 0 {
        return Err(Error::InvalidArgument("FROC needs at least one scan and one ground-truth nodule".into()));
    }
    let by_scan = group_detections(dets, gts)?;
    let mut labelled: Vec<(f64, bool)> = Vec::with_capacity(dets.len());
    for (scan, list) in &by_scan {
        let boxes: Vec<Box3> = list.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = list.iter().map(|d| d.score).collect();
        let m = match_detections(&boxes, &scores, &gts[*scan], iou_threshold);
        labelled.extend(scores.iter().zip(m.is_tp).map(|(&s, tp)| (s, tp)));
    }
    labelled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < labelled.len() {
        let t = labelled[i].0;
        while i < labelled.len() && labelled[i].0 == t {
            if labelled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            fp_per_scan: fp as f64 / n_scans as f64,
            sensitivity: tp as f64 / n_gts as f64,
        });
    }
    if points.is_empty() {
        points.push(FrocPoint {
            threshold: f64::INFINITY,
            fp_per_scan: 0.0,
            sensitivity: 0.0,
        });
    }
    Ok(FrocCurve { points, n_scans, n_gts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSensitivity {
    pub fp_rate: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpmReport {
    pub cpm: f64,
    pub sensitivities: Vec<RateSensitivity>,
    /// Stratum name to CPM; empty strata are absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub strata: BTreeMap<String, f64>,
}

/// Sensitivity at a budget: best point with `fp_per_scan ≤ rate`, 0 if none.
pub fn sensitivity_at_rate(curve: &FrocCurve, rate: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fp_per_scan <= rate)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

pub fn cpm(curve: &FrocCurve) -> CpmReport {
    let sensitivities: Vec<RateSensitivity> = CPM_RATES
        .iter()
        .map(|&r| RateSensitivity {
            fp_rate: r,
            sensitivity: sensitivity_at_rate(curve, r),
        })
        .collect();
    let cpm = sensitivities.iter().map(|s| s.sensitivity).sum::<f64>() / CPM_RATES.len() as f64;
    CpmReport {
        cpm,
        sensitivities,
        strata: BTreeMap::new(),
    }
}

/// Ground-truth stratum keys in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    Size(SizeClass),
    Attenuation(AttenuationClass),
}

impl Stratum {
    pub fn all() -> Vec<Stratum> {
        SizeClass::ALL
            .iter()
            .map(|&s| Stratum::Size(s))
            .chain(AttenuationClass::ALL.iter().map(|&a| Stratum::Attenuation(a)))
            .collect()
    }

    pub fn contains(&self, n: &NoduleRecord) -> bool {
        match *self {
            Stratum::Size(s) => n.size_class == s,
            Stratum::Attenuation(a) => n.attenuation_class == a,
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Stratum::Size(s) => s.as_str(),
            Stratum::Attenuation(a) => a.as_str(),
        }
    }

    /// Column heading.
    pub fn title(&self) -> &'static str {
        match self {
            Stratum::Size(SizeClass::Small) => "Small",
            Stratum::Size(SizeClass::Medium) => "Medium",
            Stratum::Size(SizeClass::Large) => "Large",
            Stratum::Attenuation(AttenuationClass::Solid) => "Solid",
            Stratum::Attenuation(AttenuationClass::PartSolid) => "Part-solid",
            Stratum::Attenuation(AttenuationClass::Ggn) => "GGN",
        }
    }
}

fn boxes_of(gts: &BTreeMap<String, Vec<NoduleRecord>>, keep: impl Fn(&NoduleRecord) -> bool) -> BTreeMap<String, Vec<Box3>> {
    gts.iter()
        .map(|(k, v)| (k.clone(), v.iter().filter(|n| keep(n)).map(|n| n.bbox).collect()))
        .collect()
}

/// Overall CPM plus one CPM per non-empty stratum. A stratum's score is the
/// CPM against only that stratum's nodules, every scan still counted and
/// every unmatched detection still a false positive.
pub fn stratified_cpm(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<NoduleRecord>>,
    iou_threshold: f64,
) -> Result<CpmReport> {
    let mut report = cpm(&froc(dets, &boxes_of(gts, |_| true), iou_threshold)?);
    for s in Stratum::all() {
        let subset = boxes_of(gts, |n| s.contains(n));
        if subset.values().all(Vec::is_empty) {
            continue;
        }
        report.strata.insert(s.key().to_string(), cpm(&froc(dets, &subset, iou_threshold)?).cpm);
    }
    Ok(report)
}

/// Sensitivity and FPs per scan of an already thresholded detection set.
pub fn operating_point(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<Box3>>,
    iou_threshold: f64,
) -> Result<(f64, f64)> {
    let n_gts: usize = gts.values().map(Vec::len).sum();
    if gts.is_empty() || n_gts == 0 {
        return Err(Error::InvalidArgument("operating point needs at least one ground-truth nodule".into()));
    }
    let by_scan = group_detections(dets, gts)?;
    let (mut tp, mut fp) = (0, 0);
    for (scan, list) in &by_scan {
        let boxes: Vec<Box3> = list.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = list.iter().map(|d| d.score).collect();
        let m = match_detections(&boxes, &scores, &gts[*scan], iou_threshold);
        tp += m.is_tp.iter().filter(|&&t| t).count();
        fp += m.is_tp.iter().filter(|&&t| !t).count();
    }
    Ok((tp as f64 / n_gts as f64, fp as f64 / gts.len() as f64))
}

/// Which stratum columns an evaluation report carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataSelection {
    #[default]
    All,
    Size,
    Attenuation,
    None,
}

/// One row of the Table-1-shaped report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub configuration: String,
    pub cpm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_size: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_attenuation: Option<BTreeMap<String, f64>>,
    pub sensitivities: Vec<RateSensitivity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub iou_threshold: f64,
    pub n_scans: usize,
    pub n_nodules: usize,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Score each named detection set against the same ground truth.
pub fn evaluation_report(
    configurations: &[(String, Vec<Detection>)],
    gts: &BTreeMap<String, Vec<NoduleRecord>>,
    iou_threshold: f64,
    selection: StrataSelection,
) -> Result<(EvaluationReport, Vec<(String, FrocCurve)>)> {
    let all = boxes_of(gts, |_| true);
    let want_size = matches!(selection, StrataSelection::All | StrataSelection::Size);
    let want_att = matches!(selection, StrataSelection::All | StrataSelection::Attenuation);
    let mut columns = vec!["CPM".to_string()];
    for s in Stratum::all() {
        let ok = match s {
            Stratum::Size(_) => want_size,
            Stratum::Attenuation(_) => want_att,
        };
        if ok {
            columns.push(s.title().to_string());
        }
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (name, dets) in configurations {
        let curve = froc(dets, &all, iou_threshold)?;
        let report = stratified_cpm(dets, gts, iou_threshold)?;
        let pick = |size: bool| {
            Stratum::all()
                .into_iter()
                .filter(|s| matches!(s, Stratum::Size(_)) == size)
                .filter_map(|s| report.strata.get(s.key()).map(|&v| (s.title().to_string(), v)))
                .collect::<BTreeMap<_, _>>()
        };
        rows.push(ReportRow {
            configuration: name.clone(),
            cpm: report.cpm,
            by_size: want_size.then(|| pick(true)),
            by_attenuation: want_att.then(|| pick(false)),
            sensitivities: report.sensitivities.clone(),
        });
        curves.push((name.clone(), curve));
    }
    Ok((
        EvaluationReport {
            iou_threshold,
            n_scans: all.len(),
            n_nodules: all.values().map(Vec::len).sum(),
            columns,
            rows,
        },
        curves,
    ))
}

/// `configuration,threshold,fp_per_scan,sensitivity` rows.
pub fn froc_csv(curves: &[(String, FrocCurve)]) -> String {
    let mut s = String::from("configuration,threshold,fp_per_scan,sensitivity\n");
    for (name, c) in curves {
        for p in &c.points {
            let _ = writeln!(s, "{name},{},{},{}", p.threshold, p.fp_per_scan, p.sensitivity);
        }
    }
    s
}
