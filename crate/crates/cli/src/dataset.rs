//! Dataset directories: `graph.json`, `manifest.json` and one trajectory
//! file per sequence.

use std::fs;
use std::path::{Path, PathBuf};

use altsim_core::graph::GraphFile;
use altsim_core::physics::{DriverScript, Trajectory};
use altsim_core::Graph;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const MANIFEST: &str = "manifest.json";
pub const GRAPH: &str = "graph.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub file: String,
    pub sha256: String,
    /// Seed of the material perturbation.
    pub material_seed: u64,
    pub script: DriverScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Seed of the generator every script and material seed came from.
    pub seed: u64,
    pub graph: String,
    pub graph_sha256: String,
    pub fps: f64,
    pub frames: usize,
    pub sequences: Vec<SequenceEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Fails with a usage error naming `path` when it does not exist.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError::new(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub graph: Graph,
    pub sequences: Vec<Trajectory>,
}

impl Dataset {
    /// Loads and hash-checks every file listed in the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        require(dir, "data directory")?;
        let manifest_path = dir.join(MANIFEST);
        require(&manifest_path, "dataset manifest")?;
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?,
        )
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
        if manifest.version != MANIFEST_VERSION {
            bail!("unsupported manifest version {}", manifest.version);
        }
        let graph_path = dir.join(&manifest.graph);
        let graph_bytes = fs::read(&graph_path).with_context(|| format!("reading {}", graph_path.display()))?;
        if sha256_hex(&graph_bytes) != manifest.graph_sha256 {
            bail!("{} does not match its manifest hash", graph_path.display());
        }
        let (_, graph) = GraphFile::load(&graph_path)?.into_mesh()?;
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for entry in &manifest.sequences {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            if sha256_hex(&bytes) != entry.sha256 {
                bail!("{} does not match its manifest hash", path.display());
            }
            let seq = Trajectory::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            if seq.num_nodes() != graph.num_nodes() {
                bail!(
                    "{} has {} nodes but the graph has {}",
                    path.display(),
                    seq.num_nodes(),
                    graph.num_nodes()
                );
            }
            sequences.push(seq);
        }
        if sequences.is_empty() {
            bail!("dataset {} has no sequences", dir.display());
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            graph,
            sequences,
        })
    }

    /// Frames per sequence, the shortest one counting.
    pub fn min_frames(&self) -> usize {
        self.sequences.iter().map(Trajectory::num_frames).min().unwrap_or(0)
    }

    /// Fails unless `other` lives on the same graph.
    pub fn check_same_graph(&self, other: &Dataset) -> Result<()> {
        if self.manifest.graph_sha256 != other.manifest.graph_sha256 {
            bail!(
                "{} and {} use different graphs",
                self.dir.display(),
                other.dir.display()
            );
        }
        Ok(())
    }
}
