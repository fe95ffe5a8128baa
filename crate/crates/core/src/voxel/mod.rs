//! Voxel grids, occupancy fields, overlap metrics and binvox I/O.

mod binvox;
mod grid;
mod metrics;

pub use binvox::{load_binvox, read_binvox, save_binvox, write_binvox};
pub use grid::{OccupancyField, VoxelGrid};
pub use metrics::{
    iou, proximity_class, proximity_matrix, proximity_shape, threshold, DEFAULT_THRESHOLD,
};
