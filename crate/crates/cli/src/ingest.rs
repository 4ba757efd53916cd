//! Brings registrations computed elsewhere into a manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use longreg::geometry::Grid;
use longreg::graph::{EdgeKind, Manifest, ObservationEdge};
use longreg::volume_io::{read_rigid, read_svf};
use longreg::{Error, Result};

/// Payload kind and `<ref>_<target>` stem of a registration file name, or
/// `None` when the extension is not a registration payload.
pub fn classify(name: &str) -> Option<(EdgeKind, &str)> {
    if let Some(stem) = name.strip_suffix(".rigid.txt") {
        return Some((EdgeKind::Rigid, stem));
    }
    let base = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))?;
    Some((EdgeKind::Svf, base.strip_suffix(".svf").unwrap_or(base)))
}

/// Splits `stem` at the one underscore whose both sides are timepoint ids.
pub fn split_pair<'a>(stem: &'a str, ids: &[String]) -> Option<(&'a str, &'a str)> {
    let known = |s: &str| ids.iter().any(|id| id == s);
    let mut found = None;
    for (i, _) in stem.match_indices('_') {
        let (a, b) = (&stem[..i], &stem[i + 1..]);
        if known(a) && known(b) && a != b {
            if found.is_some() {
                return None;
            }
            found = Some((a, b));
        }
    }
    found
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}

/// Every `<ref>_<target>.rigid.txt` and `<ref>_<target>[.svf].nii[.gz]` in
/// `dir`, validated and appended to a copy of `manifest`. All SVFs, new
/// and already listed, must share one grid.
pub fn ingest_external_registrations(dir: &Path, manifest: &Manifest) -> Result<Manifest> {
    let ids = manifest.node_ids();
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();

    let mut out = manifest.clone();
    let mut seen: BTreeSet<(EdgeKind, String, String)> = manifest
        .registrations
        .iter()
        .map(|e| pair_key(e.kind, &e.ref_id, &e.target_id))
        .collect();
    let mut grids: Vec<(String, Grid)> = Vec::new();
    for e in manifest.edges(EdgeKind::Svf) {
        grids.push((e.path.display().to_string(), read_svf(manifest.resolve(&e.path))?.grid().clone()));
    }

    for name in names {
        let Some((kind, stem)) = classify(&name) else {
            log::debug!("ignoring {name}: not a registration payload");
            continue;
        };
        let (a, b) = split_pair(stem, &ids).ok_or_else(|| Error::NamingConvention(name.clone()))?;
        let path = dir.join(&name);
        match kind {
            EdgeKind::Rigid => {
                read_rigid(&path)?;
            }
            EdgeKind::Svf => grids.push((name.clone(), read_svf(&path)?.grid().clone())),
        }
        if !seen.insert(pair_key(kind, a, b)) {
            return Err(Error::DuplicateEdge(a.to_string(), b.to_string()));
        }
        out.registrations.push(ObservationEdge {
            ref_id: a.to_string(),
            target_id: b.to_string(),
            kind,
            path: relative_to(&path, &manifest.base_dir),
        });
    }

    if let Some((first, g0)) = grids.first() {
        let offenders: Vec<&str> = grids
            .iter()
            .filter(|(_, g)| !g.matches(g0))
            .map(|(n, _)| n.as_str())
            .collect();
        if !offenders.is_empty() {
            return Err(Error::GridMismatch(format!(
                "{} not on the grid of {first}",
                offenders.join(", ")
            )));
        }
    }
    Ok(out)
}

fn pair_key(kind: EdgeKind, a: &str, b: &str) -> (EdgeKind, String, String) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (kind, lo.to_string(), hi.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn classifies_payloads() {
        assert_eq!(classify("a_b.rigid.txt"), Some((EdgeKind::Rigid, "a_b")));
        assert_eq!(classify("a_b.svf.nii.gz"), Some((EdgeKind::Svf, "a_b")));
        assert_eq!(classify("a_b.nii"), Some((EdgeKind::Svf, "a_b")));
        assert_eq!(classify("notes.json"), None);
    }

    #[test]
    fn splits_ids_containing_underscores() {
        let known = ids(&["sub_01", "sub_02", "x"]);
        assert_eq!(split_pair("sub_01_sub_02", &known), Some(("sub_01", "sub_02")));
        assert_eq!(split_pair("x_sub_01", &known), Some(("x", "sub_01")));
        assert_eq!(split_pair("x_y", &known), None);
        assert_eq!(split_pair("x_x", &known), None);
        assert_eq!(split_pair("xsub_01", &known), None);
    }

    #[test]
    fn ambiguous_split_is_rejected() {
        let known = ids(&["a", "a_b", "b", "b_c", "c"]);
        // a | b_c and a_b | c both name known timepoints
        assert_eq!(split_pair("a_b_c", &known), None);
    }
}
