//! Run-directory layout, stage manifests and scan storage.

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use mcgan_core::dataset::{DatasetManifest, ManifestEntry};
use mcgan_core::io::{read_volume, write_volume};
use mcgan_core::training::ScanStore;
use mcgan_core::volume::Volume;
use mcgan_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

pub const DATASET: &str = "dataset";
pub const AUGMENT: &str = "augment";
pub const POOL: &str = "pool";
pub const MANIFEST_FILE: &str = "MANIFEST.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SCAN_EXT: &str = "nii.gz";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub subcommand: String,
    pub config_sha256: String,
    /// Upstream artifacts, relative to the run directory, with digests.
    pub inputs: BTreeMap<String, String>,
    /// Every file under the stage directory except this manifest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, RunStageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStageEntry {
    pub subcommand: String,
    pub manifest_sha256: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// `path` expressed relative to `base` (both absolute, lexically normal).
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c);
    }
    out
}

/// Lexically resolve `.` and `..`.
pub fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            c => out.push(c),
        }
    }
    out
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> CliResult<Self> {
        let abs = std::path::absolute(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: normalize(&abs) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// An upstream artifact, or a dependency error naming its producer.
    pub fn require(&self, rel: &str, producer: &'static str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Dependency { artifact: p, producer })
        }
    }

    /// Start a stage from an empty directory.
    pub fn begin(&self, stage: &str, subcommand: &str) -> CliResult<Stage> {
        let dir = self.path(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Stage {
            dir,
            name: stage.to_string(),
            subcommand: subcommand.to_string(),
            inputs: BTreeMap::new(),
            root: self.root.clone(),
        })
    }
}

pub struct Stage {
    pub dir: PathBuf,
    name: String,
    subcommand: String,
    inputs: BTreeMap<String, String>,
    root: PathBuf,
}

impl Stage {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Record an upstream file by digest.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let key = relative_to(path, &self.root).to_string_lossy().replace('\\', "/");
        self.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn write_text(&self, rel: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        write_text(&p, text)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(rel);
        write_json(&p, value)?;
        Ok(p)
    }

    /// Write the config snapshot and stage manifest, then index the stage in
    /// the run manifest.
    pub fn finish(self, config: &PipelineConfig) -> CliResult<StageManifest> {
        let cfg_text = config.to_pretty_json()?;
        self.write_text(CONFIG_FILE, &cfg_text)?;
        let mut files = Vec::new();
        files_under(&self.dir, &mut files)?;
        let manifest_path = self.path(MANIFEST_FILE);
        let mut outputs = BTreeMap::new();
        for f in files.into_iter().filter(|f| *f != manifest_path) {
            let key = relative_to(&f, &self.dir).to_string_lossy().replace('\\', "/");
            outputs.insert(key, sha256_file(&f)?);
        }
        let manifest = StageManifest {
            stage: self.name.clone(),
            subcommand: self.subcommand.clone(),
            config_sha256: hex::encode(Sha256::digest(cfg_text.as_bytes())),
            inputs: self.inputs.clone(),
            outputs,
        };
        write_json(&manifest_path, &manifest)?;

        let run_path = self.root.join(MANIFEST_FILE);
        let mut run: RunManifest = if run_path.exists() {
            let text = std::fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&run_path, e.to_string()))?
        } else {
            RunManifest::default()
        };
        run.stages.insert(
            self.name.clone(),
            RunStageEntry {
                subcommand: self.subcommand.clone(),
                manifest_sha256: sha256_file(&manifest_path)?,
            },
        );
        write_json(&run_path, &run)?;
        Ok(manifest)
    }
}

/// A manifest together with the directory its relative paths hang off.
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub path: PathBuf,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            manifest,
            path: path.to_path_buf(),
            base,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        normalize(&self.base.join(&entry.path))
    }

    pub fn load_scan(&self, entry: &ManifestEntry) -> mcgan_core::Result<Volume> {
        let mut v = read_volume(&self.resolve(entry))?;
        v.scan_id = entry.scan_id.clone();
        Ok(v)
    }
}

/// Reads scans through a manifest and writes new ones under `out_dir/scans`.
pub struct FsStore<'a> {
    pub source: &'a LoadedManifest,
    pub out_dir: PathBuf,
}

impl ScanStore for FsStore<'_> {
    fn load(&self, entry: &ManifestEntry) -> mcgan_core::Result<Volume> {
        self.source.load_scan(entry)
    }

    fn store(&self, volume: &Volume) -> mcgan_core::Result<PathBuf> {
        let rel = PathBuf::from("scans").join(format!("{}.{SCAN_EXT}", volume.scan_id));
        write_volume(&self.out_dir.join(&rel), volume)?;
        Ok(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        let r = relative_to(Path::new("/a/run/dataset/scans/x.nii.gz"), Path::new("/a/run/augment"));
        assert_eq!(r, PathBuf::from("../dataset/scans/x.nii.gz"));
        assert_eq!(normalize(&Path::new("/a/run/augment").join(&r)), PathBuf::from("/a/run/dataset/scans/x.nii.gz"));
        assert_eq!(relative_to(Path::new("/a/b/c"), Path::new("/a/b")), PathBuf::from("c"));
    }

    proptest::proptest! {
        #[test]
        fn relative_path_resolves_back(
            common in proptest::collection::vec("[a-z]{1,4}", 0..3),
            path in proptest::collection::vec("[a-z]{1,4}", 1..4),
            base in proptest::collection::vec("[a-z]{1,4}", 0..4),
        ) {
            let root = PathBuf::from("/r").join(common.join("/"));
            let p = root.join(path.join("/"));
            let b = root.join(base.join("/"));
            let rel = relative_to(&p, &b);
            proptest::prop_assert!(rel.is_relative());
            proptest::prop_assert_eq!(normalize(&b.join(&rel)), p);
        }
    }

    #[test]
    fn stage_manifest_indexes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let err = run.require("dataset/manifest.json", "phantom").unwrap_err();
        assert_eq!(err.code(), "dependency");
        let stage = run.begin("demo", "phantom").unwrap();
        stage.write_text("a/b.txt", "hello\n").unwrap();
        let m = stage.finish(&PipelineConfig::for_profile(crate::config::Profile::Desk)).unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), vec!["a/b.txt", "config.json"]);
        let run_manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(run_manifest.contains("\"demo\""));
    }
}
