//! On-disk description of one subject: timepoints, observed registrations
//! and run settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimepointNode {
    pub id: String,
    /// Years from baseline.
    pub time_years: f64,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Rigid,
    Svf,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Rigid => "rigid",
            EdgeKind::Svf => "svf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEdge {
    #[serde(rename = "ref")]
    pub ref_id: String,
    #[serde(rename = "target")]
    pub target_id: String,
    pub kind: EdgeKind,
    pub path: PathBuf,
}

/// Which voxels the per-voxel SVF solve visits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Union of the timepoint masks, dilated by 3 voxels (all voxels when
    /// no masks are available).
    #[default]
    DilatedUnion,
    All,
}

/// Which timepoint pairs get registered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePolicy {
    /// Consecutive timepoints only.
    Tree,
    /// Consecutive timepoints plus last-to-first.
    Ring,
    #[default]
    All,
}

impl EdgePolicy {
    /// `(ref, target)` index pairs for `n` timepoints, ref < target except
    /// for the closing ring edge.
    pub fn pairs(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            EdgePolicy::All => (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect(),
            EdgePolicy::Tree => (1..n).map(|j| (j - 1, j)).collect(),
            EdgePolicy::Ring => {
                let mut p: Vec<_> = (1..n).map(|j| (j - 1, j)).collect();
                if n > 2 {
                    p.push((n - 1, 0));
                }
                p
            }
        }
    }
}

fn default_ratio() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Ratio of prior to likelihood Laplace scales.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// 0 means one worker per available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub mask_policy: MaskPolicy,
    /// Intensity similarity scale of the label fusion weights.
    #[serde(default = "default_sigma")]
    pub fusion_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub edges: EdgePolicy,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            ratio: default_ratio(),
            workers: 0,
            mask_policy: MaskPolicy::default(),
            fusion_sigma: default_sigma(),
            seed: 0,
            edges: EdgePolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub subject: String,
    pub timepoints: Vec<TimepointNode>,
    #[serde(default)]
    pub registrations: Vec<ObservationEdge>,
    #[serde(default)]
    pub settings: Settings,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(subject: impl Into<String>, timepoints: Vec<TimepointNode>) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            subject: subject.into(),
            timepoints,
            registrations: Vec::new(),
            settings: Settings::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.timepoints.iter().map(|t| t.id.clone()).collect()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.timepoints.iter().position(|t| t.id == id)
    }

    pub fn edges(&self, kind: EdgeKind) -> Vec<&ObservationEdge> {
        self.registrations.iter().filter(|e| e.kind == kind).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.timepoints.iter().map(|t| t.time_years).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_manifest_with_defaults() {
        let text = r#"{"schema":1,"subject":"s1","timepoints":[
            {"id":"a","time_years":0,"image":"a.nii.gz"},
            {"id":"b","time_years":1.5,"image":"b.nii.gz","labels":"b_seg.nii.gz"}],
            "registrations":[{"ref":"a","target":"b","kind":"rigid","path":"a_b.rigid.txt"}]}"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.settings, Settings::default());
        assert_eq!(m.settings.ratio, 1.0);
        assert_eq!(m.settings.fusion_sigma, 3.0);
        assert_eq!(m.registrations[0].kind, EdgeKind::Rigid);
        assert_eq!(m.timepoints[1].labels.as_deref(), Some(Path::new("b_seg.nii.gz")));
        let back: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn edge_policies() {
        assert_eq!(EdgePolicy::All.pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(EdgePolicy::Tree.pairs(3), vec![(0, 1), (1, 2)]);
        assert_eq!(EdgePolicy::Ring.pairs(4), vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert_eq!(EdgePolicy::All.pairs(6).len(), 15);
    }

    #[test]
    fn load_sets_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = Manifest::new("s", vec![]);
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back.base_dir, dir.path());
        assert_eq!(back.resolve(Path::new("x.nii")), dir.path().join("x.nii"));
    }
}
