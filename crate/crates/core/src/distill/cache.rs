//! On-disk distance cache: `SPDIST01`, `n` and resolution as little-endian
//! `u64`, the 32-byte content hash, then the strict lower triangle in
//! row-major order as little-endian `f32`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{pairwise_distances, DistanceMatrix};
use crate::error::{Error, Result};
use crate::nn::write_atomic;
use crate::voxel::VoxelGrid;

const MAGIC: &[u8; 8] = b"SPDIST01";
const HEADER: usize = 8 + 8 + 8 + 32;

/// SHA-256 over the resolution, the count and the occupancy of every shape in
/// order.
pub fn content_hash(shapes: &[VoxelGrid]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((shapes.len() as u64).to_le_bytes());
    for s in shapes {
        h.update((s.resolution() as u64).to_le_bytes());
        for w in s.words() {
            h.update(w.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_cache(
    path: &Path,
    dist: &DistanceMatrix,
    resolution: usize,
    hash: &[u8; 32],
) -> Result<()> {
    let n = dist.n();
    let mut bytes = Vec::with_capacity(HEADER + 4 * n * n.saturating_sub(1) / 2);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    bytes.extend_from_slice(&(resolution as u64).to_le_bytes());
    bytes.extend_from_slice(hash);
    for d in dist.lower() {
        bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Reads a cache file, returning the matrix, resolution and content hash.
pub fn load_cache(path: &Path) -> Result<(DistanceMatrix, usize, [u8; 32])> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a distance cache".into(),
        });
    }
    let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
    let (n, resolution) = (word(8), word(16));
    let hash: [u8; 32] = bytes[24..56].try_into().expect("32 bytes");
    let count = n * n.saturating_sub(1) / 2;
    if bytes.len() != HEADER + 4 * count {
        return Err(Error::Format {
            offset: HEADER,
            message: format!("{} payload bytes for n = {n}", bytes.len() - HEADER),
        });
    }
    let lower = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    Ok((DistanceMatrix::from_lower(n, lower), resolution, hash))
}

fn cache_path(dir: &Path, hash: &[u8; 32]) -> PathBuf {
    dir.join(format!("{}.dist", hex(hash)))
}

/// Distances of `shapes`, read from `dir` when a cache entry with the same
/// content hash exists and computed and stored otherwise. Entries are always
/// rounded to `f32`, so a hit and a miss return the same matrix.
pub fn cached_distances(dir: &Path, shapes: &[VoxelGrid]) -> Result<DistanceMatrix> {
    let hash = content_hash(shapes);
    let path = cache_path(dir, &hash);
    let resolution = shapes.first().map_or(0, VoxelGrid::resolution);
    if path.exists() {
        let (dist, r, h) = load_cache(&path)?;
        if h == hash && r == resolution && dist.n() == shapes.len() {
            return Ok(dist);
        }
    }
    let dist = pairwise_distances(shapes)?.rounded_f32();
    save_cache(&path, &dist, resolution, &hash)?;
    Ok(dist)
}
