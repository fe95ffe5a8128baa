use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary occupancy on a cubic `R×R×R` lattice.
///
/// Bits are stored in binvox order: the linear index of voxel `(x, y, z)` is
/// `x·R² + z·R + y`, so `x` varies slowest and `y` fastest. The same order is
/// used for [`OccupancyField`] and for decoder outputs, which lets the three
/// be compared index by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: usize,
    bits: Vec<u64>,
    pub translate: [f64; 3],
    pub scale: f64,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Parameter("resolution must be at least 1".into()));
        }
        let n = resolution * resolution * resolution;
        Ok(Self {
            resolution,
            bits: vec![0; n.div_ceil(64)],
            translate: [0.0; 3],
            scale: 1.0,
        })
    }

    pub fn full(resolution: usize) -> Result<Self> {
        let mut g = Self::empty(resolution)?;
        for i in 0..g.len() {
            g.set_index(i, true);
        }
        Ok(g)
    }

    /// Builds a grid from occupancy values given in linear (binvox) order.
    pub fn from_bools(resolution: usize, values: &[bool]) -> Result<Self> {
        let mut g = Self::empty(resolution)?;
        if values.len() != g.len() {
            return Err(Error::Dimension(format!(
                "expected {} voxels for resolution {resolution}, got {}",
                g.len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if v {
                g.set_index(i, true);
            }
        }
        Ok(g)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Number of lattice cells, `R³`.
    pub fn len(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.resolution;
        debug_assert!(x < r && y < r && z < r);
        (x * r + z) * r + y
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.bits[i / 64] |= mask;
        } else {
            self.bits[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_index(self.index(x, y, z))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.set_index(i, value);
    }

    /// Number of occupied voxels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// True when `self` has no voxel outside `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get_index(i))
    }

    /// Occupancy as reals in `{0, 1}`, linear order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.iter().map(|b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Raw packed words; used for content hashing.
    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub(crate) fn ensure_same_resolution(&self, other: &Self) -> Result<()> {
        if self.resolution != other.resolution {
            return Err(Error::Dimension(format!(
                "resolution {} vs {}",
                self.resolution, other.resolution
            )));
        }
        Ok(())
    }
}

/// Per-voxel occupancy probabilities, same linear order as [`VoxelGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyField {
    resolution: usize,
    probabilities: Vec<f64>,
}

impl OccupancyField {
    pub fn new(resolution: usize, probabilities: Vec<f64>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Parameter("resolution must be at least 1".into()));
        }
        let n = resolution * resolution * resolution;
        if probabilities.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} probabilities, got {}",
                probabilities.len()
            )));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Parameter(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            resolution,
            probabilities,
        })
    }

    pub fn filled(resolution: usize, value: f64) -> Result<Self> {
        Self::new(
            resolution,
            vec![value; resolution * resolution * resolution],
        )
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

impl From<&VoxelGrid> for OccupancyField {
    fn from(g: &VoxelGrid) -> Self {
        Self {
            resolution: g.resolution(),
            probabilities: g.to_f64(),
        }
    }
}
