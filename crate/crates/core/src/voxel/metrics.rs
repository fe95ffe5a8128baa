use crate::error::{Error, Result};

use super::{OccupancyField, VoxelGrid};

/// Threshold applied to predicted occupancy before scoring.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Intersection over union of two occupancy grids.
///
/// Two empty grids score 1.0; exactly one empty grid scores 0.0.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    a.ensure_same_resolution(b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Voxel `i` is occupied iff `p_i >= t`.
pub fn threshold(field: &OccupancyField, t: f64) -> Result<VoxelGrid> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Parameter(format!("threshold {t} outside (0, 1)")));
    }
    let mut g = VoxelGrid::empty(field.resolution())?;
    for (i, &p) in field.probabilities().iter().enumerate() {
        if p >= t {
            g.set_index(i, true);
        }
    }
    Ok(g)
}

/// Best IoU of `shape` against any member of `base`.
pub fn proximity_shape(shape: &VoxelGrid, base: &[VoxelGrid]) -> Result<f64> {
    if base.is_empty() {
        return Err(Error::Parameter(
            "proximity needs a nonempty base set".into(),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    for b in base {
        best = best.max(iou(shape, b)?);
    }
    Ok(best)
}

/// Mean of [`proximity_shape`] over every shape of a class.
pub fn proximity_class(class: &[VoxelGrid], base: &[VoxelGrid]) -> Result<f64> {
    if class.is_empty() {
        return Err(Error::Parameter("proximity needs a nonempty class".into()));
    }
    let mut total = 0.0;
    for s in class {
        total += proximity_shape(s, base)?;
    }
    Ok(total / class.len() as f64)
}

/// Proximity of every novel class (columns) to every base class (rows).
pub fn proximity_matrix(
    base: &[Vec<VoxelGrid>],
    novel: &[Vec<VoxelGrid>],
) -> Result<Vec<Vec<f64>>> {
    base.iter()
        .map(|b| novel.iter().map(|n| proximity_class(n, b)).collect())
        .collect()
}
