//! On-disk dataset layout: `<root>/<split>/<id>.evs`, `<root>/<split>/<id>.gt.csv`
//! and `<root>/manifest.json`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{AngularVelocitySignal, EventStream, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub split: Split,
    pub scene_id: String,
    pub contrast_threshold: f64,
    pub seed: u64,
    pub duration_us: u32,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    pub gt_dt_us: u32,
    pub seed: u64,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    /// Fails if any scene is shared between two splits.
    pub fn audit_scene_disjointness(&self) -> Result<()> {
        let mut owner: HashMap<&str, Split> = HashMap::new();
        for s in &self.sequences {
            match owner.get(s.scene_id.as_str()) {
                Some(&split) if split != s.split => {
                    return Err(Error::Dataset(format!(
                        "scene {} appears in both {split} and {} splits",
                        s.scene_id, s.split
                    )))
                }
                _ => {
                    owner.insert(&s.scene_id, s.split);
                }
            }
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
        manifest.audit_scene_disjointness()?;
        Ok(Dataset { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn split(&self, split: Split) -> Vec<&SequenceEntry> {
        self.manifest.sequences.iter().filter(|s| s.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&SequenceEntry> {
        self.manifest.sequences.iter().find(|s| s.id == id)
    }

    pub fn events_path(&self, entry: &SequenceEntry) -> PathBuf {
        self.root.join(entry.split.name()).join(format!("{}.evs", entry.id))
    }

    pub fn ground_truth_path(&self, entry: &SequenceEntry) -> PathBuf {
        self.root.join(entry.split.name()).join(format!("{}.gt.csv", entry.id))
    }

    pub fn load_events(&self, entry: &SequenceEntry) -> Result<EventStream> {
        let path = self.events_path(entry);
        EventStream::read(&path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::data(&path, other.to_string()),
        })
    }

    /// Rasterized input and the ground truth on the same bin grid.
    pub fn load(&self, entry: &SequenceEntry, dt_ms: f64) -> Result<(SpikeTensor, AngularVelocitySignal)> {
        let stream = self.load_events(entry)?;
        let tensor = stream.rasterize(dt_ms)?;
        let gt_path = self.ground_truth_path(entry);
        let gt = AngularVelocitySignal::read_csv(&gt_path)?;
        if (gt.dt_ms() - dt_ms).abs() > 1e-12 {
            return Err(Error::data(
                &gt_path,
                format!("ground truth spacing {} ms differs from bin width {dt_ms} ms", gt.dt_ms()),
            ));
        }
        if gt.len() < tensor.bins() {
            return Err(Error::data(
                &gt_path,
                format!("{} ground-truth rows for {} bins", gt.len(), tensor.bins()),
            ));
        }
        let gt = gt.truncated(tensor.bins());
        Ok((tensor, gt))
    }
}
