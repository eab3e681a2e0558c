//! Binary cache for density matrices.
//!
//! Layout: 8-byte magic `NPEBF64\0`, row count and column count as
//! little-endian `u64`, then `rows * cols` little-endian `f64` entries in
//! row-major order. A JSON manifest next to the file records the generating
//! configuration and its content hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture::{DensityKind, DensityMatrix};

pub const MAGIC: &[u8; 8] = b"NPEBF64\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub key: String,
    pub rows: u64,
    pub cols: u64,
    pub kind: DensityKind,
    pub config: serde_json::Value,
}

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn cache_key<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_matrix(path: &Path, f: &DensityMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(f.n_outcomes() as u64).to_le_bytes())?;
    w.write_all(&(f.n_types() as u64).to_le_bytes())?;
    for i in 0..f.n_outcomes() {
        for j in 0..f.n_types() {
            w.write_all(&f.get(i, j).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path, kind: DensityKind) -> Result<DensityMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("{}: not a density matrix cache", path.display())));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut columns = vec![Vec::with_capacity(rows); cols];
    for _ in 0..rows {
        for col in columns.iter_mut() {
            r.read_exact(&mut word)?;
            col.push(f64::from_le_bytes(word));
        }
    }
    if r.read(&mut word)? != 0 {
        return Err(Error::Parse(format!("{}: trailing bytes", path.display())));
    }
    DensityMatrix::from_columns_nonnegative(kind, columns)
}

/// Paths of the matrix and manifest for a cache key inside `dir`.
pub fn cache_paths(dir: &Path, key: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{key}.f64")), dir.join(format!("{key}.json")))
}

/// Stores `f` under the key derived from `config`.
pub fn store<T: Serialize>(dir: &Path, config: &T, f: &DensityMatrix) -> Result<CacheManifest> {
    let key = cache_key(config)?;
    let (mat, man) = cache_paths(dir, &key);
    std::fs::create_dir_all(dir)?;
    write_matrix(&mat, f)?;
    let manifest = CacheManifest {
        key,
        rows: f.n_outcomes() as u64,
        cols: f.n_types() as u64,
        kind: f.kind(),
        config: serde_json::to_value(config)?,
    };
    std::fs::write(man, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads the matrix stored for `config`, if present.
pub fn load<T: Serialize>(dir: &Path, config: &T) -> Result<Option<DensityMatrix>> {
    let key = cache_key(config)?;
    let (mat, man) = cache_paths(dir, &key);
    if !mat.exists() || !man.exists() {
        return Ok(None);
    }
    let manifest: CacheManifest = serde_json::from_slice(&std::fs::read(man)?)?;
    if manifest.key != key {
        return Err(Error::Parse("cache manifest key mismatch".into()));
    }
    read_matrix(&mat, manifest.kind).map(Some)
}
