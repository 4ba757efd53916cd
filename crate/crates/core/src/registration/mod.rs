//! Pairwise registrations between timepoints: rigid alignment of label
//! centroids, a log-domain SSD registration producing SVFs, and
//! symmetrisation of forward/backward fields.

mod nonlinear;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{se3_log, RigidLog, RigidTransform, Svf, VectorField};
use crate::volume_io::LabelVolume;

pub use nonlinear::{register_nonlinear_ssd, ssd, NonlinearParams, NonlinearReport};

/// World-space (mm) centroid per label id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CentroidSet {
    entries: BTreeMap<i32, Vector3<f64>>,
}

impl CentroidSet {
    pub fn new(entries: impl IntoIterator<Item = (i32, Vector3<f64>)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn ids(&self) -> Vec<i32> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, id: i32) -> Option<&Vector3<f64>> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, &Vector3<f64>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies a rigid map to every centroid.
    pub fn transformed(&self, r: &RigidTransform) -> Self {
        Self::new(self.iter().map(|(k, p)| (k, r.apply(p))))
    }
}

/// Mean world coordinate of each selected label's voxels.
pub fn centroids(labels: &LabelVolume, selected: &[i32]) -> Result<CentroidSet> {
    if let Some(&bad) = selected.iter().find(|&&l| !labels.table().contains(l)) {
        return Err(Error::UnknownLabel(bad));
    }
    let slot: BTreeMap<i32, usize> = selected.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut sums = vec![(Vector3::zeros(), 0usize); selected.len()];
    let grid = labels.grid();
    for (i, l) in labels.labels().iter().enumerate() {
        if let Some(&s) = slot.get(l) {
            let [x, y, z] = grid.coords(i);
            sums[s].0 += Vector3::new(x as f64, y as f64, z as f64);
            sums[s].1 += 1;
        }
    }
    let mut out = BTreeMap::new();
    for (&l, &s) in &slot {
        let (sum, n) = sums[s];
        if n == 0 {
            return Err(Error::EmptyLabel(l));
        }
        out.insert(l, grid.voxel_to_world(&(sum / n as f64)));
    }
    Ok(CentroidSet { entries: out })
}

/// Non-background labels present in both maps, ascending.
pub fn shared_labels(a: &LabelVolume, b: &LabelVolume) -> Vec<i32> {
    let pb = b.present();
    a.present()
        .into_iter()
        .filter(|l| *l != 0 && pb.binary_search(l).is_ok())
        .collect()
}

/// Least-squares rigid map taking reference centroids onto target
/// centroids, with a determinant fix so the result is a proper rotation.
pub fn procrustes_rigid(
    reference: &CentroidSet,
    target: &CentroidSet,
) -> Result<(RigidTransform, RigidLog)> {
    if reference.ids() != target.ids() {
        return Err(Error::LabelMismatch(format!(
            "reference labels {:?} vs target labels {:?}",
            reference.ids(),
            target.ids()
        )));
    }
    let n = reference.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{n} centroids; at least 3 non-collinear points are needed"
        )));
    }
    let a: Vec<Vector3<f64>> = reference.entries.values().copied().collect();
    let b: Vec<Vector3<f64>> = target.entries.values().copied().collect();
    let ma = a.iter().sum::<Vector3<f64>>() / n as f64;
    let mb = b.iter().sum::<Vector3<f64>>() / n as f64;

    let mut spread = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(&b) {
        let pa = p - ma;
        spread += pa * pa.transpose();
        h += pa * (q - mb).transpose();
    }
    let mut ev = SymmetricEigen::new(spread).eigenvalues.as_slice().to_vec();
    ev.sort_by(|x, y| y.total_cmp(x));
    if !(ev[0] > 0.0) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::DegenerateConfiguration(
            "reference centroids are collinear or coincident".into(),
        ));
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = mb - rotation * ma;
    let rigid = RigidTransform::new(rotation, translation)?;
    let log = se3_log(&rigid)?;
    Ok((rigid, log))
}

/// `0.5 * fwd - 0.5 * bwd`: the inverse-consistent observation for a pair.
pub fn symmetrize_svf(fwd: &Svf, bwd: &Svf) -> Result<Svf> {
    fwd.grid().ensure_matches(bwd.grid(), "symmetrize_svf")?;
    let values = fwd
        .values()
        .iter()
        .zip(bwd.values())
        .map(|(f, b)| 0.5 * f - 0.5 * b)
        .collect();
    Ok(Svf::new(VectorField::new(fwd.grid().clone(), values)?))
}
