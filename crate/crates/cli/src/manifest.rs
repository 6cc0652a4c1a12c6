use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepsis_core::pipeline::RunConfig;
use sepsis_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "sepsis-run";

/// One per run directory: what ran, on which inputs, producing what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub artifact_versions: BTreeMap<String, String>,
    /// Input directory and SHA-256 of every file under it, by relative path.
    pub input_root: PathBuf,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of all files under `dir`, keyed by `/`-separated relative path.
pub fn digest_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).expect("walked under dir");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok((key, sha256_file(p)?))
        })
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, input_root: &Path) -> Result<Self> {
        let mut versions = BTreeMap::new();
        versions.insert("sepsiswarn".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("sepsis-core".into(), sepsis_core::VERSION.into());
        Ok(RunManifest {
            format: FORMAT.into(),
            version: 1,
            command: command.into(),
            seeds: config.seeds.clone(),
            config,
            artifact_versions: versions,
            input_root: input_root.to_path_buf(),
            inputs: digest_dir(input_root)?,
            outputs: Vec::new(),
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Data(format!("{} is not a run manifest", path.display())));
        }
        Ok(m)
    }

    /// Files whose digest changed, appeared or vanished since the run.
    pub fn drift(&self) -> Result<Vec<String>> {
        let now = digest_dir(&self.input_root)?;
        let mut changed: Vec<String> = self
            .inputs
            .iter()
            .filter(|(k, v)| now.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        changed.extend(now.keys().filter(|k| !self.inputs.contains_key(*k)).cloned());
        Ok(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("train")).unwrap();
        fs::write(dir.path().join("cohort.json"), "{}").unwrap();
        fs::write(dir.path().join("train/a.csv"), "x").unwrap();
        let m = RunManifest::new("train", RunConfig::default(), dir.path()).unwrap();
        assert_eq!(m.inputs.len(), 2);
        assert!(m.inputs.contains_key("train/a.csv"));
        assert!(m.drift().unwrap().is_empty());
        fs::write(dir.path().join("train/a.csv"), "y").unwrap();
        fs::write(dir.path().join("extra"), "").unwrap();
        assert_eq!(m.drift().unwrap(), vec!["train/a.csv".to_string(), "extra".to_string()]);
    }
}
