use std::path::{Path, PathBuf};

use talkhead::config::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub const VERSION: &str = env!("TALKHEAD_VERSION");

/// Record of one command run, written next to its outputs. Artifact paths
/// are relative to the output directory so identical runs into different
/// directories produce identical manifests.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: KeyValues,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: KeyValues) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(&mut self, rel: impl Into<PathBuf>) {
        self.artifacts.push(rel.into());
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("run.command", &self.command);
        kv.set("run.version", VERSION);
        if let Some(seed) = self.seed {
            kv.set("run.seed", seed);
        }
        kv.set("run.artifacts", self.artifacts.len());
        for (i, a) in self.artifacts.iter().enumerate() {
            kv.set(&format!("artifact.{i:04}"), a.display());
        }
        let mut text = kv.to_text();
        text.push_str(&self.config.to_text());
        text
    }

    pub fn write(&self, dir: &Path) -> talkhead::Result<()> {
        talkhead::io::write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}
