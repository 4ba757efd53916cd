//! Volumes, masks and label maps, their on-disk formats, and resampling
//! through concatenated transform chains.

mod nifti;
mod resample;
mod rigid_txt;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Grid;

pub use nifti::{
    read_displacement, read_image, read_labels, read_mask, read_svf, read_volume, write_volume,
    LoadedVolume, VolumeKind,
};
pub use resample::{
    resample, resample_image, resample_labels, resample_mask, resample_one_hot, Resampled,
    SourceVolume, TransformChain, TransformStep,
};
pub use rigid_txt::{parse_rigid, read_rigid, write_rigid};

/// On-disk sample type of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    F32,
    F64,
}

impl DataType {
    pub fn is_integer(self) -> bool {
        !matches!(self, DataType::F32 | DataType::F64)
    }
}

/// Scalar image on a grid (intensities in arbitrary units).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
    datatype: DataType,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        Self::with_datatype(grid, data, DataType::F64)
    }

    pub fn with_datatype(grid: Grid, data: Vec<f64>, datatype: DataType) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples for a grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntensities);
        }
        Ok(Self {
            grid,
            data,
            datatype,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        let data = vec![0.0; grid.len()];
        Self {
            grid,
            data,
            datatype: DataType::F64,
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self {
            grid,
            data,
            datatype: DataType::F64,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn datatype(&self) -> DataType {
        self.datatype
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// Sorted `(id, name)` pairs; id 0 is background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTable(BTreeMap<i32, String>);

impl LabelTable {
    pub fn new(entries: impl IntoIterator<Item = (i32, String)>) -> Self {
        let mut map: BTreeMap<i32, String> = entries.into_iter().collect();
        map.entry(0).or_insert_with(|| "background".to_string());
        Self(map)
    }

    /// Table naming every id present in `labels`.
    pub fn from_labels(labels: &[i32]) -> Self {
        let mut map = BTreeMap::new();
        map.insert(0, "background".to_string());
        for &l in labels {
            map.entry(l).or_insert_with(|| format!("label_{l}"));
        }
        Self(map)
    }

    pub fn contains(&self, id: i32) -> bool {
        self.0.contains_key(&id)
    }

    pub fn ids(&self) -> Vec<i32> {
        self.0.keys().copied().collect()
    }

    pub fn name(&self, id: i32) -> Option<&str> {
        self.0.get(&id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, &str)> {
        self.0.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn merged(&self, other: &LabelTable) -> LabelTable {
        let mut map = self.0.clone();
        for (k, v) in &other.0 {
            map.entry(*k).or_insert_with(|| v.clone());
        }
        LabelTable(map)
    }
}

/// Integer label map with its label table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<i32>,
    table: LabelTable,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<i32>, table: LabelTable) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| !table.contains(l)) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self {
            grid,
            labels,
            table,
        })
    }

    /// Label volume whose table is generated from the values present.
    pub fn from_labels(grid: Grid, labels: Vec<i32>) -> Result<Self> {
        let table = LabelTable::from_labels(&labels);
        Self::new(grid, labels, table)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn table(&self) -> &LabelTable {
        &self.table
    }

    /// Ids that actually occur in the volume, ascending.
    pub fn present(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-voxel tissue probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    grid: Grid,
    probabilities: Vec<f64>,
}

impl MaskVolume {
    pub fn new(grid: Grid, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} mask values for a grid of {} voxels",
                probabilities.len(),
                grid.len()
            )));
        }
        if let Some(v) = probabilities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidManifest(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            grid,
            probabilities,
        })
    }

    pub fn from_binary(grid: Grid, inside: &[bool]) -> Result<Self> {
        Self::new(grid, inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn binary(&self, threshold: f64) -> Vec<bool> {
        self.probabilities.iter().map(|&p| p > threshold).collect()
    }
}

/// Indicator volumes for the selected labels, in the order given.
pub fn one_hot(labels: &LabelVolume, selected: &[i32]) -> Result<Vec<Volume>> {
    if let Some(&bad) = selected.iter().find(|&&l| !labels.table.contains(l)) {
        return Err(Error::UnknownLabel(bad));
    }
    Ok(selected
        .iter()
        .map(|&id| {
            let data = labels
                .labels
                .iter()
                .map(|&l| if l == id { 1.0 } else { 0.0 })
                .collect();
            Volume {
                grid: labels.grid.clone(),
                data,
                datatype: DataType::F64,
            }
        })
        .collect())
}

/// Voxelwise argmax over channels; ties go to the lowest id.
///
/// `ids` must be sorted ascending and match `channels` one to one.
pub fn argmax_labels(channels: &[Vec<f64>], ids: &[i32]) -> Vec<i32> {
    assert_eq!(channels.len(), ids.len());
    debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let n = channels.first().map_or(0, Vec::len);
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..channels.len() {
                if channels[c][v] > channels[best][v] {
                    best = c;
                }
            }
            ids[best]
        })
        .collect()
}
