//! Self-describing binary array format.
//!
//! The payload is little-endian f32, row-major; a JSON sidecar at
//! `<path>.json` records shape, dtype, a semantic kind tag, the geometry
//! hash and generation seed. Writes go through a temp file plus rename so a
//! crashed run never leaves a truncated artifact behind.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const ARRAY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArraySidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: u32,
}

impl ArraySidecar {
    pub fn new(shape: &[usize], kind: &str) -> Self {
        ArraySidecar {
            shape: shape.to_vec(),
            dtype: "f32".to_string(),
            kind: kind.to_string(),
            geometry_hash: None,
            seed: None,
            version: ARRAY_FORMAT_VERSION,
        }
    }

    pub fn with_geometry(mut self, hash: &str) -> Self {
        self.geometry_hash = Some(hash.to_string());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes payload and sidecar; `values` are cast to f32.
pub fn write_array(path: &Path, values: &[f64], sidecar: &ArraySidecar) -> Result<()> {
    if values.len() != sidecar.elements() {
        return Err(Error::Dim(format!(
            "payload has {} values, sidecar shape {:?} wants {}",
            values.len(),
            sidecar.shape,
            sidecar.elements()
        )));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    atomic_write(&sidecar_path(path), serde_json::to_string_pretty(sidecar)?.as_bytes())?;
    Ok(())
}

/// Reads payload (lifted to f64) and sidecar, verifying the length contract.
pub fn read_array(path: &Path) -> Result<(Vec<f64>, ArraySidecar)> {
    let sidecar: ArraySidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != sidecar.elements() * 4 {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes, sidecar shape {:?} wants {}",
            path.display(),
            bytes.len(),
            sidecar.shape,
            sidecar.elements() * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((values, sidecar))
}

/// True when the file exists and its sidecar matches shape, kind and the
/// optional geometry hash / seed stamps. Used for resumable generation.
pub fn array_is_valid(path: &Path, expected: &ArraySidecar) -> bool {
    let Ok(content) = fs::read_to_string(sidecar_path(path)) else {
        return false;
    };
    let Ok(sidecar) = serde_json::from_str::<ArraySidecar>(&content) else {
        return false;
    };
    if sidecar != *expected {
        return false;
    }
    match fs::metadata(path) {
        Ok(meta) => meta.len() as usize == expected.elements() * 4,
        Err(_) => false,
    }
}

pub fn write_array2(
    path: &Path,
    arr: &ndarray::Array2<f64>,
    sidecar: &ArraySidecar,
) -> Result<()> {
    write_array(path, arr.as_slice().expect("contiguous"), sidecar)
}

pub fn read_array2(path: &Path) -> Result<(ndarray::Array2<f64>, ArraySidecar)> {
    let (values, sidecar) = read_array(path)?;
    if sidecar.shape.len() != 2 {
        return Err(Error::Dim(format!(
            "{} holds a rank-{} array, expected rank 2",
            path.display(),
            sidecar.shape.len()
        )));
    }
    let arr = ndarray::Array2::from_shape_vec((sidecar.shape[0], sidecar.shape[1]), values)
        .map_err(|e| Error::Dim(e.to_string()))?;
    Ok((arr, sidecar))
}

pub fn write_array3(
    path: &Path,
    arr: &ndarray::Array3<f64>,
    sidecar: &ArraySidecar,
) -> Result<()> {
    write_array(path, arr.as_slice().expect("contiguous"), sidecar)
}

pub fn read_array3(path: &Path) -> Result<(ndarray::Array3<f64>, ArraySidecar)> {
    let (values, sidecar) = read_array(path)?;
    if sidecar.shape.len() != 3 {
        return Err(Error::Dim(format!(
            "{} holds a rank-{} array, expected rank 3",
            path.display(),
            sidecar.shape.len()
        )));
    }
    let arr = ndarray::Array3::from_shape_vec(
        (sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]),
        values,
    )
    .map_err(|e| Error::Dim(e.to_string()))?;
    Ok((arr, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let arr = Array2::from_shape_fn((7, 5), |(i, j)| (i * 5 + j) as f64 * 0.137 - 1.0);
        let sc = ArraySidecar::new(&[7, 5], "test").with_seed(42);
        write_array2(&path, &arr, &sc).unwrap();
        let (back, sc_back) = read_array2(&path).unwrap();
        assert_eq!(sc_back, sc);
        for (a, b) in arr.iter().zip(back.iter()) {
            // One f32 cast each way: stored bits must agree exactly.
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        // Second read returns identical bytes.
        let bytes1 = std::fs::read(&path).unwrap();
        write_array2(&path, &back, &sc).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn validity_check_catches_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.bin");
        let arr = Array2::zeros((3, 3));
        let sc = ArraySidecar::new(&[3, 3], "test").with_geometry("abc");
        write_array2(&path, &arr, &sc).unwrap();
        assert!(array_is_valid(&path, &sc));
        let wrong_kind = ArraySidecar::new(&[3, 3], "other").with_geometry("abc");
        assert!(!array_is_valid(&path, &wrong_kind));
        let wrong_geom = ArraySidecar::new(&[3, 3], "test").with_geometry("zzz");
        assert!(!array_is_valid(&path, &wrong_geom));
        assert!(!array_is_valid(&dir.path().join("missing.bin"), &sc));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let sc = ArraySidecar::new(&[4], "test");
        write_array(&path, &[1.0, 2.0, 3.0, 4.0], &sc).unwrap();
        // Corrupt the payload length.
        std::fs::write(&path, [0u8; 9]).unwrap();
        assert!(read_array(&path).is_err());
    }
}
