//! SHA-256 digests of files and of structured stage inputs.

use std::path::Path;

use sha2::{Digest, Sha256};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> longreg::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| longreg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_bytes(&bytes))
}

/// Digest of a sequence of labelled fields. Each field is length-prefixed
/// so that moving bytes between fields changes the result.
#[derive(Default)]
pub struct InputHasher(Sha256);

impl InputHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, label: &str, value: &[u8]) -> &mut Self {
        for part in [label.as_bytes(), value] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}
