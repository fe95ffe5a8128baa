use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_adapted, class_queries, query_ious, EvalOptions, Experiment, Method, MethodRun, ReportRow,
};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::nn::Real;
use crate::priors::PriorKind;
use crate::seed::rng_for;
use crate::synth::Dataset;
use crate::train::batch_images;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    GceRand,
    CodebookKnockout,
    PlacementSweep,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gce_rand" => Ok(Self::GceRand),
            "codebook_knockout" | "knockout" => Ok(Self::CodebookKnockout),
            "placement_sweep" | "placement" => Ok(Self::PlacementSweep),
            _ => Err(Error::Configuration(format!("unknown ablation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub seed: u64,
    /// Classes to evaluate; every conditioned dataset class when absent.
    pub classes: Option<Vec<String>>,
    pub eval: EvalOptions,
    /// Training and adaptation settings of the placement sweep.
    pub sweep: Option<Experiment>,
}

/// Effect of removing one codebook from a class's composed embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRow {
    pub class: String,
    /// 1-based codebook index.
    pub codebook: usize,
    pub baseline_iou: f64,
    pub mean_iou: f64,
    /// Mean number of voxels whose thresholded occupancy changes.
    pub mean_voxel_diff: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<ReportRow>,
    pub knockout: Vec<KnockoutRow>,
}

fn default_classes<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    classes: Option<&[String]>,
) -> Vec<String> {
    match classes {
        Some(c) => c.to_vec(),
        None => data
            .roles
            .keys()
            .filter(|c| model.classes().contains_key(*c) && model.has_conditioning(c))
            .cloned()
            .collect(),
    }
}

/// Evaluates every query conditioned on a different class, drawn uniformly
/// from the model's other conditioned classes with a per-query seed.
pub fn gce_rand<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    classes: Option<&[String]>,
    seed: u64,
    opts: EvalOptions,
) -> Result<Vec<ReportRow>> {
    if !model.variant().is_conditioned() {
        return Err(Error::Configuration(format!(
            "random class conditioning needs a conditioned model, not {}",
            model.variant()
        )));
    }
    let classes = default_classes(model, data, classes);
    check_adapted(model, &classes)?;
    let pool: Vec<&str> = model
        .classes()
        .keys()
        .map(String::as_str)
        .filter(|c| model.has_conditioning(c))
        .collect();
    let method = format!("{}-rand", Method::Prior(model.variant()));
    class_queries(data, &classes)?
        .into_iter()
        .map(|(class, q)| {
            let others: Vec<&str> = pool.iter().copied().filter(|c| *c != class).collect();
            if others.is_empty() {
                return Err(Error::Configuration(format!(
                    "no other class to condition {class} on"
                )));
            }
            let cond: Vec<&str> = q
                .iter()
                .map(|i| {
                    others
                        [rng_for(seed, &["gce-rand", &i.to_string()]).random_range(0..others.len())]
                })
                .collect();
            let ious = query_ious(model, data, &q, &cond, opts, None)?;
            Ok(ReportRow {
                mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
                n_queries: ious.len(),
                class,
                method: method.clone(),
                shots: 0,
                relative_gain: None,
            })
        })
        .collect()
}

fn occupancy<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    samples: &[usize],
    class: &str,
    knockout: Option<usize>,
    opts: EvalOptions,
) -> Result<Vec<Vec<bool>>> {
    let cut = T::of((opts.threshold / (1.0 - opts.threshold)).ln());
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch.max(1)) {
        let images = batch_images::<T>(data, chunk)?;
        let cond = vec![class; chunk.len()];
        let (logits, _) = model.forward(
            &images,
            &cond,
            ForwardOptions {
                train: false,
                knockout,
            },
        )?;
        for i in 0..chunk.len() {
            out.push(logits.item(i).iter().map(|&z| z >= cut).collect());
        }
    }
    Ok(out)
}

/// Reconstructions with each codebook removed in turn, against the full
/// composition: IoU to the ground truth and the number of changed voxels.
pub fn codebook_knockout<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    classes: Option<&[String]>,
    opts: EvalOptions,
) -> Result<Vec<KnockoutRow>> {
    if model.variant() != PriorKind::Cgce {
        return Err(Error::Configuration(format!(
            "codebook knockout needs a cgce model, not {}",
            model.variant()
        )));
    }
    let classes = default_classes(model, data, classes);
    check_adapted(model, &classes)?;
    let books = model.config().codebooks;
    let mut rows = Vec::new();
    for (class, q) in class_queries(data, &classes)? {
        let baseline = query_ious(model, data, &q, &vec![class.as_str(); q.len()], opts, None)?;
        let baseline_iou = baseline.iter().sum::<f64>() / q.len() as f64;
        let full = occupancy(model, data, &q, &class, None, opts)?;
        for j in 1..=books {
            let ious = query_ious(
                model,
                data,
                &q,
                &vec![class.as_str(); q.len()],
                opts,
                Some(j),
            )?;
            let ko = occupancy(model, data, &q, &class, Some(j), opts)?;
            let diff: usize = full
                .iter()
                .zip(&ko)
                .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
                .sum();
            rows.push(KnockoutRow {
                class: class.clone(),
                codebook: j,
                baseline_iou,
                mean_iou: ious.iter().sum::<f64>() / q.len() as f64,
                mean_voxel_diff: diff as f64 / q.len() as f64,
                n_queries: q.len(),
            });
        }
    }
    Ok(rows)
}

/// Trains and adapts each encoder/decoder placement on `data` and reports
/// its mean novel-class IoU, one row per placement.
pub fn placement_sweep(exp: &Experiment, data: &Dataset, seed: u64) -> Result<Vec<ReportRow>> {
    PriorKind::PLACEMENTS
        .iter()
        .map(|&k| {
            let run = MethodRun::run(Method::Prior(k), exp, data, seed)?;
            let n = run.novel.len() as f64;
            Ok(ReportRow {
                class: "novel-mean".into(),
                method: run.method.name(),
                shots: exp.shots,
                mean_iou: run.novel.iter().map(|r| r.mean_iou).sum::<f64>() / n,
                relative_gain: None,
                n_queries: run.novel.iter().map(|r| r.n_queries).sum(),
            })
        })
        .collect()
}

/// Dispatches on `spec.kind`. The placement sweep trains its own models and
/// uses `model` only for its architecture when `spec.sweep` is absent.
pub fn run_ablation(
    model: &Model<f32>,
    spec: &AblationSpec,
    data: &Dataset,
) -> Result<AblationReport> {
    let classes = spec.classes.as_deref();
    let (rows, knockout) = match spec.kind {
        AblationKind::GceRand => (
            gce_rand(model, data, classes, spec.seed, spec.eval)?,
            Vec::new(),
        ),
        AblationKind::CodebookKnockout => {
            let ko = codebook_knockout(model, data, classes, spec.eval)?;
            let rows = ko
                .iter()
                .map(|k| ReportRow {
                    class: k.class.clone(),
                    method: format!("cgce-knockout-{}", k.codebook),
                    shots: 0,
                    mean_iou: k.mean_iou,
                    relative_gain: None,
                    n_queries: k.n_queries,
                })
                .collect();
            (rows, ko)
        }
        AblationKind::PlacementSweep => {
            let exp = spec.sweep.clone().ok_or_else(|| {
                Error::Configuration(
                    "the placement sweep needs training and adaptation settings".into(),
                )
            })?;
            (placement_sweep(&exp, data, spec.seed)?, Vec::new())
        }
    };
    Ok(AblationReport {
        kind: spec.kind,
        rows,
        knockout,
    })
}
