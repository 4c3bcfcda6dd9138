//! Artifact writing: every file lands via write-to-temp-then-rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use bscopula::SCHEMA_VERSION;
use serde::Serialize;

use crate::config::RunConfig;

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp{}", std::process::id()));
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path).with_context(|| format!("renaming into {}", path.display()))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Renders into a buffer with `f`, then writes the buffer atomically.
    pub fn with_writer(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> bscopula::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write_bytes(name, &buf)
    }

    pub fn manifest(mut self, cfg: &RunConfig, wall_time: f64, results: serde_json::Value) -> anyhow::Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            schema_version: u32,
            command: &'a str,
            seed: u64,
            config: &'a RunConfig,
            wall_time_seconds: f64,
            artifacts: &'a [String],
            results: serde_json::Value,
        }
        let written = self.written.clone();
        self.json(
            "manifest.json",
            &Manifest {
                schema_version: SCHEMA_VERSION,
                command: &cfg.command,
                seed: cfg.seed,
                config: cfg,
                wall_time_seconds: wall_time,
                artifacts: &written,
                results,
            },
        )
    }
}

/// Adds `schema_version` to a serializable object.
pub fn versioned<T: Serialize>(value: &T) -> anyhow::Result<serde_json::Value> {
    let mut v = serde_json::to_value(value)?;
    if let Some(map) = v.as_object_mut() {
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    Ok(v)
}
