//! Pipeline configuration: profile defaults, JSON file overrides, flags.

use crate::error::CliResult;
use mcgan_core::dataset::FilterRules;
use mcgan_core::phantom::PhantomConfig;
use mcgan_core::blending::BlendConfig;
use mcgan_core::detector::DetectorConfig;
use mcgan_core::evaluation::{StrataSelection, TsneConfig, DEFAULT_MATCH_IOU};
use mcgan_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-scale hyperparameters.
    Paper,
    /// CPU-sized networks and schedules.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub split: u64,
    pub augment: u64,
    pub synthesize: u64,
    pub detector: u64,
    pub vtt: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSection {
    pub scans: usize,
    #[serde(flatten)]
    pub volume: PhantomConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    /// Scans with more nodules than this stay in the training split.
    pub nodule_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    pub ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSection {
    /// Synthetic items exported per image kind.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    pub iou_threshold: f64,
    pub by: StrataSelection,
}

/// Everything a run depends on. Written next to every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seeds: Seeds,
    pub phantom: PhantomSection,
    pub filter: FilterRules,
    pub split: SplitSection,
    pub gan: TrainConfig,
    pub blend: BlendConfig,
    pub augment: AugmentSection,
    pub pool: PoolSection,
    pub detector: DetectorConfig,
    pub evaluation: EvaluationSection,
    pub tsne: TsneConfig,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (gan, detector) = match profile {
            Profile::Paper => (TrainConfig::paper(), DetectorConfig::paper()),
            Profile::Desk => (TrainConfig::desk(), DetectorConfig::desk()),
        };
        Self {
            profile,
            seeds: Seeds {
                phantom: 0,
                split: 0,
                augment: 0,
                synthesize: 0,
                detector: 0,
                vtt: 0,
            },
            phantom: PhantomSection {
                scans: 12,
                volume: PhantomConfig::default(),
            },
            filter: FilterRules::default(),
            split: SplitSection {
                ratios: [0.7, 0.1, 0.2],
                nodule_cap: None,
            },
            gan,
            blend: BlendConfig::default(),
            augment: AugmentSection { ratio: 1 },
            pool: PoolSection { count: 60 },
            detector,
            evaluation: EvaluationSection {
                iou_threshold: DEFAULT_MATCH_IOU,
                by: StrataSelection::All,
            },
            tsne: TsneConfig::default(),
        }
    }

    /// Profile defaults overlaid with `file` (a partial JSON object). The
    /// profile is taken from `profile_flag`, then the file, then `desk`.
    pub fn resolve(profile_flag: Option<Profile>, file: Option<&Path>) -> CliResult<Self> {
        let overlay = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| mcgan_core::Error::io(p, e))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| mcgan_core::Error::format(p, e.to_string()))?;
                if !v.is_object() {
                    return Err(mcgan_core::Error::format(p, "config must be a JSON object").into());
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        let from_file = match overlay.get("profile") {
            Some(v) => Some(
                serde_json::from_value::<Profile>(v.clone())
                    .map_err(|e| mcgan_core::Error::Configuration(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile_flag.or(from_file).unwrap_or(Profile::Desk);
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut merged, &overlay);
        merged["profile"] = serde_json::to_value(profile)?;
        let cfg: Self =
            serde_json::from_value(merged.clone()).map_err(|e| mcgan_core::Error::Configuration(e.to_string()))?;
        let round_trip = serde_json::to_value(&cfg)?;
        if let Some(key) = unknown_key(&merged, &round_trip, "") {
            return Err(mcgan_core::Error::Configuration(format!("unknown config key '{key}'")).into());
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.gan.validate()?;
        self.detector.validate()?;
        let r = self.split.ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(mcgan_core::Error::Configuration(format!("split ratios {r:?} must be non-negative and sum to 1")).into());
        }
        if !(self.evaluation.iou_threshold > 0.0 && self.evaluation.iou_threshold <= 1.0) {
            return Err(mcgan_core::Error::Configuration("evaluation.iou_threshold must lie in (0, 1]".into()).into());
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Recursive object merge; anything but an object replaces the target.
fn merge(target: &mut Value, overlay: &Value) {
    match (target, overlay) {
        (Value::Object(t), Value::Object(o)) => {
            for (k, v) in o {
                match t.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        t.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (t, o) => *t = o.clone(),
    }
}

/// First key present in `given` but dropped by deserialisation.
fn unknown_key(given: &Value, kept: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(k)) = (given, kept) else {
        return None;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None if !v.is_null() => return Some(path),
            None => {}
            Some(kv) => {
                if let Some(p) = unknown_key(v, kv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn precedence_flag_file_profile() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"profile": "paper", "gan": {"total_steps": 77}}"#);
        let c = PipelineConfig::resolve(None, Some(&p)).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.gan.total_steps, 77);
        assert_eq!(c.gan.batch_size, 16);
        let c = PipelineConfig::resolve(Some(Profile::Desk), Some(&p)).unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.gan.total_steps, 77);
        assert_eq!(c.gan.batch_size, 2);
        let c = PipelineConfig::resolve(None, None).unwrap();
        assert_eq!(c, PipelineConfig::for_profile(Profile::Desk));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"gan": {"total_stepz": 5}}"#);
        let e = PipelineConfig::resolve(None, Some(&p)).unwrap_err();
        assert!(e.to_string().contains("gan.total_stepz"), "{e}");
        let p = write(dir.path(), r#"{"bogus": 1}"#);
        assert_eq!(PipelineConfig::resolve(None, Some(&p)).unwrap_err().code(), "configuration");
    }

    #[test]
    fn paper_profile_carries_full_scale_values() {
        let c = PipelineConfig::for_profile(Profile::Paper);
        assert_eq!(c.gan.total_steps, 6_000_000);
        assert_eq!(c.gan.batch_size, 16);
        assert_eq!(c.gan.learning_rate, 2.0e-4);
        assert_eq!(c.detector.total_steps, 40_000);
        c.validate().unwrap();
        PipelineConfig::for_profile(Profile::Desk).validate().unwrap();
    }
}
