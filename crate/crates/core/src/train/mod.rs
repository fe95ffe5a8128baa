//! Base training, few-shot adaptation of class-specific parameters and the
//! retrieval baseline.

mod adapt;
mod onn;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassRole, ForwardOptions, GradMode, Model};
use crate::nn::{
    bce_with_logits, build_optimizer, write_atomic, Module, OptimizerKind, Real, Tensor,
};
use crate::priors::{wallace_prior, PriorKind};
use crate::seed::rng_for;
use crate::synth::{Dataset, Split};
use crate::voxel::VoxelGrid;

pub use adapt::{adapt_novel, AdaptConfig, AdaptReport, FewShotEpisode};
pub use onn::{onn_retrieve, onn_scores, OnnK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Average-shape models only: when set, every batch conditions each class
    /// on the average of this many of its training shapes, drawn afresh,
    /// instead of the average of all of them.
    #[serde(default)]
    pub prior_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            prior_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.prior_subset == Some(0) {
            return Err(Error::Configuration(
                "the prior subset needs at least one shape".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Configuration(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<EpochRecord>,
}

impl LossCurve {
    /// `epoch,split,loss,mean_iou` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,mean_iou\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.8},{:.8}", r.epoch, r.split, r.loss, r.mean_iou);
        }
        s
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }
}

/// Stacks the images of `samples` into `[N, 3, S, S]`.
pub fn batch_images<T: Real>(data: &Dataset, samples: &[usize]) -> Result<Tensor<T>> {
    let s = data.image_size;
    let mut v = Vec::with_capacity(samples.len() * 3 * s * s);
    for &i in samples {
        v.extend(data.samples[i].image.iter().map(|&p| T::of(p as f64)));
    }
    Tensor::from_vec(&[samples.len(), 3, s, s], v)
}

pub fn batch_targets<'a>(data: &'a Dataset, samples: &[usize]) -> Vec<&'a VoxelGrid> {
    samples
        .iter()
        .map(|&i| &data.shapes[data.samples[i].shape])
        .collect()
}

pub fn batch_classes<'a>(data: &'a Dataset, samples: &[usize]) -> Vec<&'a str> {
    samples
        .iter()
        .map(|&i| data.samples[i].class.as_str())
        .collect()
}

/// IoU of `logit ≥ 0` (probability ≥ 0.5) against the target.
pub fn logits_iou<T: Real>(logits: &[T], target: &VoxelGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (j, &z) in logits.iter().enumerate() {
        let p = z >= T::zero();
        let y = target.get_index(j);
        inter += (p && y) as usize;
        union += (p || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn training_shapes<'a>(data: &'a Dataset, class: &str) -> Result<Vec<&'a VoxelGrid>> {
    let shapes: Vec<&VoxelGrid> = data
        .shapes_of(class, Split::Train)
        .iter()
        .map(|&i| &data.shapes[i])
        .collect();
    if shapes.is_empty() {
        return Err(Error::Configuration(format!(
            "no training shapes for base class {class}"
        )));
    }
    Ok(shapes)
}

/// Sets the average-shape prior of every base class that lacks one from its
/// training shapes.
pub fn fill_average_shapes<T: Real>(model: &mut Model<T>, data: &Dataset) -> Result<()> {
    if model.variant() != PriorKind::WallaceAvg {
        return Ok(());
    }
    let base: Vec<String> = model.base_classes().into_iter().map(String::from).collect();
    for c in base {
        if !model.has_conditioning(&c) {
            model.set_average_shape(&c, &wallace_prior(&training_shapes(data, &c)?)?)?;
        }
    }
    Ok(())
}

fn resample_average_shapes<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    classes: &[&str],
    k: usize,
    seed: u64,
    step: &str,
) -> Result<()> {
    let mut distinct = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for c in distinct {
        let mut shapes = training_shapes(data, c)?;
        shapes.shuffle(&mut rng_for(seed, &["prior-subset", step, c]));
        shapes.truncate(k);
        model.set_average_shape(c, &wallace_prior(&shapes)?)?;
    }
    Ok(())
}

/// Minimises the voxel BCE over `samples` for `config.epochs` epochs with
/// per-epoch shuffling from the run seed. Every sample must belong to a base
/// class of `model`.
pub fn train_base<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    samples: &[usize],
    config: &TrainConfig,
) -> Result<LossCurve> {
    train_base_with(model, data, samples, config, |_, _| {})
}

/// [`train_base`] with a callback after every epoch.
pub fn train_base_with<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    samples: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Model<T>, &EpochRecord),
) -> Result<LossCurve> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Configuration("no training samples".into()));
    }
    let mut foreign: Vec<&str> = samples
        .iter()
        .map(|&i| data.samples[i].class.as_str())
        .filter(|c| model.classes().get(*c) != Some(&ClassRole::Base))
        .collect();
    if !foreign.is_empty() {
        foreign.sort_unstable();
        foreign.dedup();
        return Err(Error::Configuration(format!(
            "training samples from classes that are not base classes of the model: {}",
            foreign.join(", ")
        )));
    }
    if data.image_size != model.config().image_size || data.resolution != model.config().resolution
    {
        return Err(Error::Dimension(format!(
            "dataset has {}px images and {}³ shapes, model expects {}px and {}³",
            data.image_size,
            data.resolution,
            model.config().image_size,
            model.config().resolution
        )));
    }
    fill_average_shapes(model, data)?;
    let subset = config
        .prior_subset
        .filter(|_| model.variant() == PriorKind::WallaceAvg);

    let mut opt = build_optimizer::<T>(config.optimizer, config.learning_rate, config.momentum);
    let mut curve = LossCurve::default();
    let mut order = samples.to_vec();
    for epoch in 1..=config.epochs {
        order.copy_from_slice(samples);
        order.shuffle(&mut rng_for(config.seed, &["epoch", &epoch.to_string()]));
        let (mut loss_sum, mut iou_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            // batch statistics of a single sample are degenerate
            if batch.len() < 2 {
                continue;
            }
            let images = batch_images::<T>(data, batch)?;
            let classes = batch_classes(data, batch);
            if let Some(k) = subset {
                resample_average_shapes(
                    model,
                    data,
                    &classes,
                    k,
                    config.seed,
                    &format!("{epoch}/{b}"),
                )?;
            }
            let targets = batch_targets(data, batch);
            let opts = ForwardOptions {
                train: true,
                knockout: None,
            };
            let (logits, cache) = model.forward(&images, &classes, opts)?;
            let (loss, dl) = bce_with_logits(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            model.zero_grad();
            model.backward(&cache, &dl, GradMode::ALL)?;
            model.update_running(&cache);
            opt.begin_step();
            model.visit_mut("", &mut |name, p| opt.update(name, p));
            loss_sum += loss * batch.len() as f64;
            for (i, t) in targets.iter().enumerate() {
                iou_sum += logits_iou(logits.item(i), t);
            }
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Configuration(
                "every batch had fewer than two samples".into(),
            ));
        }
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            mean_iou: iou_sum / seen as f64,
        };
        on_epoch(model, &rec);
        curve.records.push(rec);
    }
    if subset.is_some() {
        let base: Vec<String> = model.base_classes().into_iter().map(String::from).collect();
        for c in base {
            model.set_average_shape(&c, &wallace_prior(&training_shapes(data, &c)?)?)?;
        }
    }
    Ok(curve)
}

/// Mean eval-mode IoU over `samples` at threshold 0.5, in batches.
pub fn mean_iou<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    samples: &[usize],
    batch: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("mean IoU of an empty sample set".into()));
    }
    let scores = sample_ious(model, data, samples, batch)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Eval-mode IoU of every sample, in input order.
pub fn sample_ious<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    samples: &[usize],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images = batch_images::<T>(data, chunk)?;
        let classes = batch_classes(data, chunk);
        let (logits, _) = model.forward(&images, &classes, ForwardOptions::default())?;
        for (i, t) in batch_targets(data, chunk).iter().enumerate() {
            out.push(logits_iou(logits.item(i), t));
        }
    }
    Ok(out)
}

/// Eval-mode occupancy field for one dataset sample.
pub fn predict<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    sample: usize,
    class: &str,
) -> Result<crate::voxel::OccupancyField> {
    let img = batch_images::<T>(data, &[sample])?;
    Ok(model.predict_batch(&img, &[class])?.remove(0))
}

/// Everything needed to reproduce a checkpoint, stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub variant: PriorKind,
    pub manifest: PathBuf,
    pub seed: u64,
    pub model: crate::model::ModelConfig,
    pub train: Option<TrainConfig>,
    pub adapt: Option<AdaptConfig>,
    #[serde(default)]
    pub notes: serde_json::Value,
}

pub fn descriptor_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

impl RunDescriptor {
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        write_atomic(
            &descriptor_path(checkpoint),
            &serde_json::to_vec_pretty(self)?,
        )
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let p = descriptor_path(checkpoint);
        Ok(serde_json::from_slice(
            &std::fs::read(&p).map_err(|e| Error::io(&p, e))?,
        )?)
    }
}
