//! Directory archives: a `manifest.json` plus one raw little-endian `f64`
//! file per array. Used for body templates, datasets and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub format: String,
    pub version: u32,
    pub meta: M,
    pub arrays: Vec<ArrayEntry>,
}

/// Arrays loaded from an archive, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Arrays {
    entries: Vec<(String, Matrix)>,
}

impl Arrays {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, dir: &Path, name: &str) -> Result<Matrix> {
        self.get(name).cloned().ok_or_else(|| Error::Archive {
            path: dir.to_path_buf(),
            message: format!("missing array `{name}`"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.f64")
}

pub fn encode_f64_le(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_f64_le(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

pub fn save<M: Serialize>(
    dir: &Path,
    format: &str,
    version: u32,
    meta: &M,
    arrays: &[(&str, &Matrix)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, m) in arrays {
        let file = file_name(name);
        if entries.iter().any(|e: &ArrayEntry| e.file == file) {
            return Err(Error::InvalidArgument(format!("duplicate array name `{name}`")));
        }
        let path = dir.join(&file);
        fs::write(&path, encode_f64_le(m.as_slice())).map_err(|e| Error::io(&path, e))?;
        entries.push(ArrayEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            file,
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        version,
        meta,
        arrays: entries,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load<M: DeserializeOwned>(dir: &Path, format: &str) -> Result<(Manifest<M>, Arrays)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest<M> = serde_json::from_str(&text)?;
    if manifest.format != format {
        return Err(Error::Archive {
            path: dir.to_path_buf(),
            message: format!("expected format `{format}`, found `{}`", manifest.format),
        });
    }
    let mut entries = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let p: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        let values = decode_f64_le(&bytes).ok_or_else(|| Error::Archive {
            path: p.clone(),
            message: "length is not a multiple of 8".into(),
        })?;
        let m = Matrix::from_vec(e.rows, e.cols, values).map_err(|_| Error::Archive {
            path: p.clone(),
            message: format!("expected {}x{} values", e.rows, e.cols),
        })?;
        entries.push((e.name.clone(), m));
    }
    Ok((manifest, Arrays { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let a = Matrix::from_rows(&[[1.0, -0.0, f64::MIN_POSITIVE], [1e300, 3.25, -7.5]]).unwrap();
        save(dir.path(), "test", 1, &"meta", &[("a/b", &a)]).unwrap();
        let (m, arrays) = load::<String>(dir.path(), "test").unwrap();
        assert_eq!(m.meta, "meta");
        let b = arrays.get("a/b").unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_format_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), "one", 1, &(), &[]).unwrap();
        assert!(load::<()>(dir.path(), "two").is_err());
    }

    #[test]
    fn truncated_array_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Matrix::zeros(2, 2);
        save(dir.path(), "t", 1, &(), &[("a", &a)]).unwrap();
        std::fs::write(dir.path().join("a.f64"), [0u8; 12]).unwrap();
        assert!(load::<()>(dir.path(), "t").is_err());
    }
}
