//! Rigid transforms as plain-text 4x4 matrices (row-major, whitespace
//! separated, last row `0 0 0 1`).

use std::path::Path;

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

pub fn parse_rigid(text: &str, path: &Path) -> Result<RigidTransform> {
    let mut values = Vec::with_capacity(16);
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap_or("");
        for tok in content.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset,
                message: format!("'{tok}' is not a number"),
            })?;
            values.push(v);
        }
        offset += line.len() as u64;
    }
    if values.len() != 16 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: format!("expected 16 matrix entries, found {}", values.len()),
        });
    }
    let m = Matrix4::from_row_slice(&values);
    if (m.row(3) - Matrix4::<f64>::identity().row(3)).amax() > 1e-9 {
        return Err(Error::NotARigidTransform(format!(
            "{}: last row must be 0 0 0 1",
            path.display()
        )));
    }
    RigidTransform::from_matrix(&m)
}

pub fn read_rigid(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rigid(&text, path)
}

/// Writes with shortest round-trip formatting so a read gives back the
/// same bits.
pub fn write_rigid(r: &RigidTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let m = r.to_matrix();
    let mut s = String::new();
    for row in 0..4 {
        let line: Vec<String> = (0..4).map(|c| format!("{}", m[(row, c)])).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
