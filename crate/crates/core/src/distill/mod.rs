//! Dataset distillation: per-class k-medoids on `1 − IoU` distances with a
//! few views kept per medoid.

mod cache;
mod kmedoids;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::synth::{DatasetManifest, ManifestEntry, Split};
use crate::voxel::{iou, load_binvox, VoxelGrid};

pub use cache::{cached_distances, content_hash, load_cache, save_cache};
pub use kmedoids::{kmedoids, kmedoids_with_restarts, MedoidSet, DEFAULT_RESTARTS};

/// Symmetric `n×n` matrix of `1 − IoU`, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a matrix from a row-major `n×n` table, checking symmetry, the
    /// zero diagonal and the `[0, 1]` range.
    pub fn from_full(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Dimension(format!(
                "{} entries for a {n}×{n} matrix",
                entries.len()
            )));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::Parameter(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let d = entries[i * n + j];
                if d != entries[j * n + i] || !(0.0..=1.0).contains(&d) {
                    return Err(Error::Parameter(format!(
                        "entry ({i}, {j}) = {d} breaks symmetry or range"
                    )));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub(crate) fn from_lower(n: usize, lower: impl Iterator<Item = f64>) -> Self {
        let mut entries = vec![0.0; n * n];
        let mut it = lower;
        for i in 1..n {
            for j in 0..i {
                let d = it.next().expect("lower triangle length");
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Strict lower triangle in row-major order.
    pub fn lower(&self) -> impl Iterator<Item = f64> + '_ {
        (1..self.n).flat_map(move |i| (0..i).map(move |j| self.get(i, j)))
    }

    /// The same matrix with entries rounded through `f32`, the precision of
    /// the on-disk cache.
    pub fn rounded_f32(&self) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|&d| d as f32 as f64).collect(),
        }
    }
}

/// `d(i, j) = 1 − IoU(S_i, S_j)`.
pub fn pairwise_distances(shapes: &[VoxelGrid]) -> Result<DistanceMatrix> {
    let n = shapes.len();
    if let Some(first) = shapes.first() {
        if let Some(bad) = shapes.iter().find(|s| s.resolution() != first.resolution()) {
            return Err(Error::Dimension(format!(
                "mixed resolutions {} and {}",
                first.resolution(),
                bad.resolution()
            )));
        }
    }
    let rows: Vec<usize> = (1..n).collect();
    let threads = std::thread::available_parallelism()
        .map_or(1, |t| t.get())
        .min(rows.len().max(1));
    // interleave rows so every thread gets a similar number of pairs
    let parts: Vec<Result<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let rows = &rows;
                s.spawn(move || {
                    rows.iter()
                        .skip(t)
                        .step_by(threads)
                        .map(|&i| {
                            Ok((
                                i,
                                (0..i)
                                    .map(|j| Ok(1.0 - iou(&shapes[i], &shapes[j])?))
                                    .collect::<Result<_>>()?,
                            ))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("distance worker panicked"))
            .collect()
    });
    let mut by_row = vec![Vec::new(); n];
    for part in parts {
        for (i, row) in part? {
            by_row[i] = row;
        }
    }
    Ok(DistanceMatrix::from_lower(n, by_row.into_iter().flatten()))
}

/// Distillation parameters: `k` medoids per class, `views` views per medoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniSpec {
    pub k: usize,
    pub views: usize,
    pub seed: u64,
}

impl Default for MiniSpec {
    fn default() -> Self {
        Self {
            k: 1250,
            views: 4,
            seed: 0,
        }
    }
}

/// Number of shapes kept per class: `min(k, size)`.
pub fn kept_counts(sizes: &[usize], k: usize) -> Vec<usize> {
    sizes.iter().map(|&n| n.min(k)).collect()
}

/// Distils the training split of `manifest`: per class, k-medoids over the
/// class's training shapes (sorted by path, so the result does not depend on
/// entry order), then `views` views per medoid drawn without replacement.
/// Test entries are carried over unchanged. With `cache_dir`, distance
/// matrices are cached there by content hash.
pub fn distill(
    manifest: &DatasetManifest,
    spec: &MiniSpec,
    cache_dir: Option<&Path>,
) -> Result<DatasetManifest> {
    if spec.k == 0 || spec.views == 0 {
        return Err(Error::Parameter("k and views must be at least 1".into()));
    }
    let mut entries = Vec::new();
    let mut kept = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut objectives = BTreeMap::new();
    for class in manifest.header.classes.keys() {
        let mut paths: Vec<String> = manifest
            .entries
            .iter()
            .filter(|e| &e.class == class && e.split == Split::Train)
            .map(|e| e.shape.clone())
            .collect();
        paths.sort();
        paths.dedup();
        if paths.is_empty() {
            return Err(Error::Configuration(format!(
                "class {class} has no training shapes to distil"
            )));
        }
        let medoids: Vec<usize> = if spec.k >= paths.len() {
            (0..paths.len()).collect()
        } else {
            let shapes: Vec<VoxelGrid> = paths
                .iter()
                .map(|p| load_binvox(&manifest.root.join(p)))
                .collect::<Result<_>>()?;
            let dist = match cache_dir {
                Some(dir) => cached_distances(dir, &shapes)?,
                None => pairwise_distances(&shapes)?,
            };
            let set = kmedoids(
                &dist,
                spec.k,
                crate::seed::derive_seed(spec.seed, &["kmedoids", class]),
            )?;
            objectives.insert(class.clone(), set.objective);
            let mut m = set.indices.clone();
            m.sort_unstable();
            m
        };
        kept.insert(class.clone(), medoids.len());
        sizes.insert(class.clone(), paths.len());
        for &m in &medoids {
            let path = &paths[m];
            let mut views: Vec<&ManifestEntry> = manifest
                .entries
                .iter()
                .filter(|e| &e.shape == path && e.split == Split::Train)
                .collect();
            views.sort_by_key(|e| e.view);
            views.shuffle(&mut rng_for(spec.seed, &["views", path]));
            views.truncate(spec.views);
            views.sort_by_key(|e| e.view);
            entries.extend(views.into_iter().cloned());
        }
    }
    entries.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .cloned(),
    );
    let mut header = manifest.header.clone();
    header.provenance = serde_json::json!({
        "source": manifest.header.provenance,
        "distill": {
            "k": spec.k,
            "views": spec.views,
            "seed": spec.seed,
            "view_sampling": "per medoid, without replacement",
            "class_sizes": sizes,
            "kept": kept,
            "objectives": objectives,
        }
    });
    Ok(DatasetManifest {
        header,
        entries,
        root: manifest.root.clone(),
    })
}

/// Per-class `IoU_mini / IoU_full` and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRatio {
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn performance_ratio(
    iou_mini: &BTreeMap<String, f64>,
    iou_full: &BTreeMap<String, f64>,
) -> Result<PerformanceRatio> {
    if iou_mini.len() != iou_full.len() || iou_mini.keys().any(|k| !iou_full.contains_key(k)) {
        return Err(Error::Configuration(
            "mini and full results cover different classes".into(),
        ));
    }
    if iou_mini.is_empty() {
        return Err(Error::Parameter("no classes to compare".into()));
    }
    let mut per_class = BTreeMap::new();
    for (c, &full) in iou_full {
        if full == 0.0 {
            return Err(Error::Numeric(format!("full-data IoU of {c} is zero")));
        }
        per_class.insert(c.clone(), iou_mini[c] / full);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(PerformanceRatio { per_class, mean })
}
