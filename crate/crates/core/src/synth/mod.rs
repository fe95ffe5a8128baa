//! Procedural stand-in for a shape/image dataset: parametric shape families,
//! an orthographic renderer and manifest-backed dataset files.

pub mod dataset;
pub mod family;
pub mod render;

pub use dataset::{
    build_dataset, shape_splits, Dataset, DatasetManifest, ManifestEntry, ManifestHeader, Sample,
    Split,
};
pub use family::{generate_class, rasterize, Cuboid, Family, ParamRange, SynthClassSpec};
pub use render::{render, render_views, sample_camera, Camera, Image, RenderParams};
