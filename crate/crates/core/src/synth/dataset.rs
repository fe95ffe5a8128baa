//! Dataset manifests, materialisation of synthetic datasets and loading.
//!
//! A manifest is a JSON-lines file with one `{image, shape, class, view,
//! split}` object per line and a sidecar `<manifest>.header.json` holding the
//! seed, generator version, class roles and provenance. Paths are relative to
//! the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassRole;
use crate::nn::checkpoint::write_atomic;
use crate::seed::{derive_seed, rng_for};
use crate::voxel::{load_binvox, save_binvox, VoxelGrid};

use super::family::{generate_class, SynthClassSpec};
use super::render::{render_views, Image, RenderParams};

pub const GENERATOR_VERSION: &str = concat!("shapeprior-synth/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub shape: String,
    pub class: String,
    pub view: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub generator_version: String,
    pub resolution: usize,
    pub image_size: usize,
    pub classes: BTreeMap<String, ClassRole>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

pub fn header_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

impl DatasetManifest {
    pub fn entries_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn header_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&self.header)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Writes the entries file and its sidecar header atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(&header_path(path), &self.header_bytes()?)?;
        write_atomic(path, &self.entries_bytes()?)
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let hp = header_path(path);
        let header: ManifestHeader =
            serde_json::from_slice(&std::fs::read(&hp).map_err(|e| Error::io(&hp, e))?)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let e: ManifestEntry = serde_json::from_str(trimmed)
                    .map_err(|err| Error::format(offset, format!("manifest entry: {err}")))?;
                entries.push(e);
            }
            offset += line.len();
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self {
            header,
            entries,
            root,
        };
        m.check_paths()?;
        Ok(m)
    }

    fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            if !self.header.classes.contains_key(&e.class) {
                return Err(Error::Configuration(format!(
                    "entry class {} has no role in the header",
                    e.class
                )));
            }
            for p in [&e.image, &e.shape] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "manifest path does not resolve",
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self, role: ClassRole) -> Vec<String> {
        self.header
            .classes
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Distinct shape paths of `class` in first-appearance order.
    pub fn shapes_of(&self, class: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.class == class) {
            if !out.contains(&e.shape) {
                out.push(e.shape.clone());
            }
        }
        out
    }
}

/// Generates every class, renders `views` images per shape and writes
/// shapes, images and `manifest.jsonl` under `out_dir`. The train/test split
/// is drawn per shape, so all views of a shape share its split.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    specs: &[SynthClassSpec],
    per_class: usize,
    views: usize,
    split_ratio: f64,
    seed: u64,
    render: &RenderParams,
    resolution: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Parameter(format!(
            "split ratio {split_ratio} is outside (0, 1)"
        )));
    }
    let mut classes = BTreeMap::new();
    for s in specs {
        if classes.insert(s.class_id.clone(), s.role).is_some() {
            return Err(Error::Configuration(format!(
                "duplicate class id {}",
                s.class_id
            )));
        }
    }
    render.validate()?;
    let mut entries = Vec::new();
    for spec in specs {
        let class_seed = derive_seed(seed, &["class", &spec.class_id, &spec.seed.to_string()]);
        let shapes = generate_class(spec, per_class, class_seed, resolution)?;
        let split = shape_splits(per_class, split_ratio, seed, &spec.class_id);
        let shape_dir = out_dir.join("shapes").join(&spec.class_id);
        let image_dir = out_dir.join("images").join(&spec.class_id);
        for d in [&shape_dir, &image_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, grid) in shapes.iter().enumerate() {
            let shape_rel = format!("shapes/{}/{i:04}.binvox", spec.class_id);
            save_binvox(&out_dir.join(&shape_rel), grid)?;
            let render_seed = derive_seed(seed, &["render", &spec.class_id, &i.to_string()]);
            for (v, (_, img)) in render_views(grid, render, views, render_seed)?
                .into_iter()
                .enumerate()
            {
                let image_rel = format!("images/{}/{i:04}_{v:02}.png", spec.class_id);
                img.save(&out_dir.join(&image_rel))?;
                entries.push(ManifestEntry {
                    image: image_rel,
                    shape: shape_rel.clone(),
                    class: spec.class_id.clone(),
                    view: v,
                    split: split[i],
                });
            }
        }
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            seed,
            generator_version: GENERATOR_VERSION.to_string(),
            resolution,
            image_size: render.image_size,
            classes,
            provenance: serde_json::json!({
                "generator": {
                    "specs": specs,
                    "per_class": per_class,
                    "views": views,
                    "split_ratio": split_ratio,
                    "render": render,
                }
            }),
        },
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Per-shape split: `round(ratio·n)` shapes (at least one of each split when
/// `n ≥ 2`) go to train, chosen by a seeded shuffle.
pub fn shape_splits(n: usize, ratio: f64, seed: u64, class: &str) -> Vec<Split> {
    let mut n_train = (ratio * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &["split", class]));
    let mut out = vec![Split::Test; n];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    out
}

/// One image with its target shape.
#[derive(Clone, Debug)]
pub struct Sample {
    pub class: String,
    /// Index into [`Dataset::shapes`].
    pub shape: usize,
    pub view: usize,
    pub split: Split,
    /// Planar `[3, S, S]` pixels.
    pub image: Vec<f32>,
}

/// A manifest loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub image_size: usize,
    pub roles: BTreeMap<String, ClassRole>,
    pub shapes: Vec<VoxelGrid>,
    pub shape_paths: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every entry. With `image_size` set, images are box-downsampled
    /// to that size.
    pub fn load(manifest: &DatasetManifest, image_size: Option<usize>) -> Result<Self> {
        let mut shapes = Vec::new();
        let mut shape_paths: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut samples = Vec::new();
        let mut size = None;
        for e in &manifest.entries {
            let shape = match index.get(&e.shape) {
                Some(&i) => i,
                None => {
                    let g = load_binvox(&manifest.root.join(&e.shape))?;
                    if g.resolution() != manifest.header.resolution {
                        return Err(Error::Dimension(format!(
                            "{} has resolution {}, manifest says {}",
                            e.shape,
                            g.resolution(),
                            manifest.header.resolution
                        )));
                    }
                    shapes.push(g);
                    shape_paths.push(e.shape.clone());
                    index.insert(e.shape.clone(), shapes.len() - 1);
                    shapes.len() - 1
                }
            };
            let mut img = Image::load(&manifest.root.join(&e.image))?;
            if let Some(s) = image_size {
                if img.size != s {
                    img = img.downsample(img.size / s.max(1))?;
                }
            }
            if *size.get_or_insert(img.size) != img.size {
                return Err(Error::Dimension(format!(
                    "{} has a different image size",
                    e.image
                )));
            }
            samples.push(Sample {
                class: e.class.clone(),
                shape,
                view: e.view,
                split: e.split,
                image: img.to_chw(),
            });
        }
        Ok(Self {
            resolution: manifest.header.resolution,
            image_size: size.unwrap_or(manifest.header.image_size),
            roles: manifest.header.classes.clone(),
            shapes,
            shape_paths,
            samples,
        })
    }

    /// Indices of the samples matching `pred`, in dataset order.
    pub fn select(&self, pred: impl Fn(&Sample) -> bool) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| pred(&self.samples[i]))
            .collect()
    }

    pub fn classes(&self, role: ClassRole) -> Vec<String> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Distinct shape indices of `class` within `split`, ascending.
    pub fn shapes_of(&self, class: &str, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| s.class == class && s.split == split)
            .map(|s| s.shape)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_split_counts() {
        let s = shape_splits(10, 0.8, 1, "a");
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 8);
        let s = shape_splits(2, 0.99, 1, "a");
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 1);
        assert_eq!(shape_splits(1, 0.5, 1, "a"), vec![Split::Train]);
    }

    #[test]
    fn header_path_appends_suffix() {
        assert_eq!(
            header_path(Path::new("/d/m.jsonl")),
            PathBuf::from("/d/m.jsonl.header.json")
        );
    }
}
