//! The longitudinal graph: timepoints around a latent template, observed
//! registrations between them, and the incidence matrix linking the two.

mod manifest;

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use manifest::{
    EdgeKind, EdgePolicy, Manifest, MaskPolicy, ObservationEdge, Settings, TimepointNode,
    SCHEMA_VERSION,
};

use crate::volume_io::{read_image, read_labels, read_mask, LabelVolume, MaskVolume, Volume};

/// A timepoint's volumes in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TimepointData {
    pub id: String,
    pub time_years: f64,
    pub image: Volume,
    pub labels: Option<LabelVolume>,
    pub mask: Option<MaskVolume>,
}

pub fn load_timepoint(manifest: &Manifest, node: &TimepointNode) -> Result<TimepointData> {
    Ok(TimepointData {
        id: node.id.clone(),
        time_years: node.time_years,
        image: read_image(manifest.resolve(&node.image))?,
        labels: node
            .labels
            .as_ref()
            .map(|p| read_labels(manifest.resolve(p)))
            .transpose()?,
        mask: node
            .mask
            .as_ref()
            .map(|p| read_mask(manifest.resolve(p)))
            .transpose()?,
    })
}

/// Loads every timepoint in manifest order.
pub fn load_timepoints(manifest: &Manifest) -> Result<Vec<TimepointData>> {
    manifest
        .timepoints
        .iter()
        .map(|n| load_timepoint(manifest, n))
        .collect()
}

/// Sparse K×N incidence: row k is −1 at its reference node and +1 at its
/// target node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceMatrix {
    nodes: usize,
    rows: Vec<(usize, usize)>,
}

impl IncidenceMatrix {
    /// Rows from `(ref, target)` pairs; duplicates allowed, connectivity
    /// not checked.
    pub fn from_pairs(nodes: usize, rows: Vec<(usize, usize)>) -> Result<Self> {
        for &(a, b) in &rows {
            if a >= nodes || b >= nodes {
                return Err(Error::UnknownNode(format!("#{}", a.max(b))));
            }
            if a == b {
                return Err(Error::InvalidManifest(format!("self-edge on node #{a}")));
            }
        }
        Ok(Self { nodes, rows })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn get(&self, k: usize, n: usize) -> f64 {
        let (a, b) = self.rows[k];
        if n == a {
            -1.0
        } else if n == b {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.nodes, |k, n| self.get(k, n))
    }

    /// `W t` for a latent vector.
    pub fn apply(&self, t: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|&(a, b)| t[b] - t[a]).collect()
    }

    /// Connected components of the undirected edge graph, each sorted,
    /// ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(self.nodes);
        for &(a, b) in &self.rows {
            uf.union(a, b);
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_slot = vec![usize::MAX; self.nodes];
        for n in 0..self.nodes {
            let r = uf.find(n);
            if root_slot[r] == usize::MAX {
                root_slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[root_slot[r]].push(n);
        }
        groups
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Incidence matrix of the manifest's edges of one kind, in manifest
/// order.
pub fn build_incidence(manifest: &Manifest, kind: EdgeKind) -> Result<IncidenceMatrix> {
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for e in manifest.edges(kind) {
        let a = manifest
            .node_index(&e.ref_id)
            .ok_or_else(|| Error::UnknownNode(e.ref_id.clone()))?;
        let b = manifest
            .node_index(&e.target_id)
            .ok_or_else(|| Error::UnknownNode(e.target_id.clone()))?;
        if a == b {
            return Err(Error::InvalidManifest(format!(
                "edge {} -> {} has identical endpoints",
                e.ref_id, e.target_id
            )));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(Error::DuplicateEdge(e.ref_id.clone(), e.target_id.clone()));
        }
        rows.push((a, b));
    }
    let w = IncidenceMatrix::from_pairs(manifest.timepoints.len(), rows)?;
    let comps = w.components();
    if comps.len() > 1 {
        return Err(Error::DisconnectedGraph(
            comps
                .into_iter()
                .map(|c| c.into_iter().map(|n| manifest.timepoints[n].id.clone()).collect())
                .collect(),
        ));
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Fatal,
    Warning,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IssueKind {
    MissingFile(PathBuf),
    DisconnectedGraph(Vec<Vec<String>>),
    DuplicateEdge(String, String),
    UnknownNode(String),
    FewEdges { kind: EdgeKind, edges: usize, nodes: usize },
    Invalid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub severity: Severity,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn fatal(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Fatal,
            kind,
            message,
        });
    }

    fn warn(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Warning,
            kind,
            message,
        });
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Fatal)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn is_ok(&self) -> bool {
        self.errors().next().is_none()
    }

    /// The first fatal issue as an error, if any.
    pub fn into_result(self) -> Result<()> {
        let Some(first) = self.issues.into_iter().find(|i| i.severity == Severity::Fatal) else {
            return Ok(());
        };
        Err(match first.kind {
            IssueKind::DisconnectedGraph(c) => Error::DisconnectedGraph(c),
            IssueKind::DuplicateEdge(a, b) => Error::DuplicateEdge(a, b),
            IssueKind::UnknownNode(n) => Error::UnknownNode(n),
            _ => Error::InvalidManifest(first.message),
        })
    }
}

fn is_svf_path(p: &std::path::Path) -> bool {
    let s = p.to_string_lossy();
    s.ends_with(".nii") || s.ends_with(".nii.gz")
}

/// Collects every problem with a manifest. With `check_files`, referenced
/// paths must exist.
pub fn validate_manifest(m: &Manifest, check_files: bool) -> ValidationReport {
    let mut r = ValidationReport::default();
    if m.schema != SCHEMA_VERSION {
        r.fatal(
            IssueKind::Invalid,
            format!("unsupported schema {} (expected {SCHEMA_VERSION})", m.schema),
        );
    }
    if m.timepoints.is_empty() {
        r.fatal(IssueKind::Invalid, "manifest has no timepoints".into());
    }
    let mut ids = BTreeSet::new();
    for t in &m.timepoints {
        if t.id.is_empty() {
            r.fatal(IssueKind::Invalid, "empty timepoint id".into());
        }
        if !ids.insert(t.id.as_str()) {
            r.fatal(IssueKind::Invalid, format!("duplicate timepoint id '{}'", t.id));
        }
        if !t.time_years.is_finite() {
            r.fatal(IssueKind::Invalid, format!("timepoint '{}' has a non-finite time", t.id));
        }
    }
    if !m.timepoints.is_empty() && !m.timepoints.iter().any(|t| t.time_years == 0.0) {
        r.fatal(
            IssueKind::Invalid,
            "no timepoint at time_years = 0 (times are years from baseline)".into(),
        );
    }
    if !(m.settings.ratio > 0.0 && m.settings.ratio.is_finite()) {
        r.fatal(IssueKind::Invalid, format!("ratio must be positive, got {}", m.settings.ratio));
    }
    if !(m.settings.fusion_sigma > 0.0) {
        r.fatal(
            IssueKind::Invalid,
            format!("fusion_sigma must be positive, got {}", m.settings.fusion_sigma),
        );
    }

    if check_files {
        let mut need = |p: &PathBuf, what: String| {
            let full = m.resolve(p);
            if !full.exists() {
                r.fatal(
                    IssueKind::MissingFile(full.clone()),
                    format!("{what}: file not found: {}", full.display()),
                );
            }
        };
        for t in &m.timepoints {
            need(&t.image, format!("timepoint '{}' image", t.id));
            if let Some(p) = &t.labels {
                need(p, format!("timepoint '{}' labels", t.id));
            }
            if let Some(p) = &t.mask {
                need(p, format!("timepoint '{}' mask", t.id));
            }
        }
        for e in &m.registrations {
            need(&e.path, format!("{} edge {} -> {}", e.kind.as_str(), e.ref_id, e.target_id));
        }
    }

    for kind in [EdgeKind::Rigid, EdgeKind::Svf] {
        let edges = m.edges(kind);
        if edges.is_empty() {
            continue;
        }
        for e in &edges {
            let svf_like = is_svf_path(&e.path);
            if svf_like != (kind == EdgeKind::Svf) {
                r.fatal(
                    IssueKind::Invalid,
                    format!(
                        "{} edge {} -> {} has payload {} of the wrong kind",
                        kind.as_str(),
                        e.ref_id,
                        e.target_id,
                        e.path.display()
                    ),
                );
            }
        }
        match build_incidence(m, kind) {
            Ok(w) => {
                if w.edges() < w.nodes() {
                    r.warn(
                        IssueKind::FewEdges {
                            kind,
                            edges: w.edges(),
                            nodes: w.nodes(),
                        },
                        format!(
                            "{} {} edges for {} timepoints; more edges than timepoints make the solve robust to outliers",
                            w.edges(),
                            kind.as_str(),
                            w.nodes()
                        ),
                    );
                }
            }
            Err(Error::DisconnectedGraph(c)) => r.fatal(
                IssueKind::DisconnectedGraph(c.clone()),
                format!("{} edges leave the graph disconnected: {c:?}", kind.as_str()),
            ),
            Err(Error::DuplicateEdge(a, b)) => r.fatal(
                IssueKind::DuplicateEdge(a.clone(), b.clone()),
                format!("duplicate {} edge between '{a}' and '{b}'", kind.as_str()),
            ),
            Err(Error::UnknownNode(n)) => r.fatal(
                IssueKind::UnknownNode(n.clone()),
                format!("{} edge references unknown timepoint '{n}'", kind.as_str()),
            ),
            Err(e) => r.fatal(IssueKind::Invalid, e.to_string()),
        }
    }
    r
}
