use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// An output directory plus the manifest of everything written into it.
///
/// Each artifact is recorded as `name -> sha256(bytes)`, so two runs
/// produced identical outputs exactly when their manifests are equal.
/// `finish` merges into any existing `manifest.json`, letting several
/// commands share one results directory.
pub struct OutDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    artifacts: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<OutDir> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir { root: root.to_path_buf(), artifacts: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_string(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, body.as_bytes());
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.write_string(name, &body)
    }

    /// Register a file some other writer already placed under the root.
    pub fn record_file(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let body = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.record(name, &body);
        Ok(())
    }

    fn record(&mut self, name: &str, body: &[u8]) {
        self.artifacts.insert(name.to_string(), hex::encode(Sha256::digest(body)));
    }

    /// Merge this run's artifacts into `manifest.json` and write it out.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest_path = self.path("manifest.json");
        let mut artifacts = match fs::read_to_string(&manifest_path) {
            Ok(body) => serde_json::from_str::<Manifest>(&body)
                .with_context(|| format!("parsing {}", manifest_path.display()))?
                .artifacts,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => {
                return Err(e).context(format!("reading {}", manifest_path.display()));
            }
        };
        artifacts.extend(self.artifacts);
        let mut body = serde_json::to_string_pretty(&Manifest { artifacts })?;
        body.push('\n');
        fs::write(&manifest_path, &body)
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(manifest_path)
    }
}
