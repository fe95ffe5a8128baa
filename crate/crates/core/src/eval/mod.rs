//! Per-class evaluation, relative gains over the zero-shot baseline,
//! ablations and report files.

mod ablation;
mod benchmark;
mod pipeline;
mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Real;
use crate::synth::{Dataset, Split};
use crate::train::{batch_images, batch_targets};
use crate::voxel::{save_binvox, threshold, VoxelGrid, DEFAULT_THRESHOLD};

pub use ablation::{
    codebook_knockout, gce_rand, placement_sweep, run_ablation, AblationKind, AblationReport,
    AblationSpec, KnockoutRow,
};
pub use benchmark::{reference_classes, run_seed, BenchmarkData, SeedResult};
pub use pipeline::{adapt_novel_classes, train_method, Experiment, Method, MethodRun};
pub use report::{
    config_hash, emit_report, parse_csv_report, parse_markdown_report, ReportFormat,
    ReportProvenance, REPORT_COLUMNS,
};

/// Mean IoU of one method on one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub method: String,
    /// Support shots per novel class; 0 when nothing was adapted.
    pub shots: usize,
    pub mean_iou: f64,
    /// `(mean_iou − iou_ZS) / iou_ZS`, once computed.
    pub relative_gain: Option<f64>,
    pub n_queries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            batch: 16,
        }
    }
}

/// IoU of `sigmoid(logit) ≥ t` against the target.
pub fn logits_iou_at<T: Real>(logits: &[T], target: &VoxelGrid, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Parameter(format!("threshold {t} is outside (0, 1)")));
    }
    let cut = T::of((t / (1.0 - t)).ln());
    let (mut inter, mut union) = (0usize, 0usize);
    for (j, &z) in logits.iter().enumerate() {
        let p = z >= cut;
        let y = target.get_index(j);
        inter += (p && y) as usize;
        union += (p || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU of every query, conditioning sample `i` on `conditioning[i]`.
pub(crate) fn query_ious<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    queries: &[usize],
    conditioning: &[&str],
    opts: EvalOptions,
    knockout: Option<usize>,
) -> Result<Vec<f64>> {
    let batch = opts.batch.max(1);
    let chunks: Vec<(usize, usize)> = (0..queries.len())
        .step_by(batch)
        .map(|s| (s, (s + batch).min(queries.len())))
        .collect();
    let threads = std::thread::available_parallelism()
        .map_or(1, |t| t.get())
        .min(chunks.len())
        .max(1);
    let run = |&(s, e): &(usize, usize)| -> Result<Vec<f64>> {
        let idx = &queries[s..e];
        let images = batch_images::<T>(data, idx)?;
        let fwd = crate::model::ForwardOptions {
            train: false,
            knockout,
        };
        let (logits, _) = model.forward(&images, &conditioning[s..e], fwd)?;
        batch_targets(data, idx)
            .iter()
            .enumerate()
            .map(|(i, t)| logits_iou_at(logits.item(i), t, opts.threshold))
            .collect()
    };
    let parts: Vec<Result<Vec<f64>>> = if threads == 1 {
        chunks.iter().map(run).collect()
    } else {
        let run = &run;
        let chunks = &chunks;
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    sc.spawn(move || {
                        chunks
                            .iter()
                            .skip(t)
                            .step_by(threads)
                            .map(run)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut per_thread: Vec<std::vec::IntoIter<Result<Vec<f64>>>> = handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked").into_iter())
                .collect();
            // chunk c was handled by thread c % threads, in order
            (0..chunks.len())
                .map(|c| per_thread[c % threads].next().expect("chunk result"))
                .collect()
        })
    };
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Test-split query samples of each class, erroring on classes without any.
pub(crate) fn class_queries(
    data: &Dataset,
    classes: &[String],
) -> Result<Vec<(String, Vec<usize>)>> {
    classes
        .iter()
        .map(|c| {
            if !data.roles.contains_key(c) {
                return Err(Error::Lookup(format!("class {c} is not in the dataset")));
            }
            let q = data.select(|s| &s.class == c && s.split == Split::Test);
            if q.is_empty() {
                return Err(Error::Configuration(format!(
                    "class {c} has no test queries"
                )));
            }
            Ok((c.clone(), q))
        })
        .collect()
}

pub(crate) fn check_adapted<T: Real>(model: &Model<T>, classes: &[String]) -> Result<()> {
    let missing: Vec<&str> = classes
        .iter()
        .map(String::as_str)
        .filter(|c| !model.has_conditioning(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Lookup(format!(
            "{} has no adapted conditioning for: {}",
            model.variant(),
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Mean IoU over all test-split views of each class (every dataset class when
/// `classes` is `None`), conditioning each query on its own class.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    classes: Option<&[String]>,
    method: &str,
    shots: usize,
    opts: EvalOptions,
) -> Result<Vec<ReportRow>> {
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => data.roles.keys().cloned().collect(),
    };
    check_adapted(model, &classes)?;
    let per_class = class_queries(data, &classes)?;
    per_class
        .into_iter()
        .map(|(class, q)| {
            let cond = vec![class.as_str(); q.len()];
            let ious = query_ious(model, data, &q, &cond, opts, None)?;
            Ok(ReportRow {
                mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
                n_queries: ious.len(),
                class,
                method: method.to_string(),
                shots,
                relative_gain: None,
            })
        })
        .collect()
}

/// Per-class gains of `rows` over `zs_rows` and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub rows: Vec<ReportRow>,
    pub mean_iou: f64,
    pub mean_relative_gain: f64,
}

/// `(m − z) / z` per class, with the mean over classes. Both row sets must
/// cover the same classes with the same query counts.
pub fn relative_gain(rows: &[ReportRow], zs_rows: &[ReportRow]) -> Result<GainSummary> {
    if rows.is_empty() {
        return Err(Error::Parameter("no rows to compare".into()));
    }
    let zs: BTreeMap<&str, &ReportRow> = zs_rows.iter().map(|r| (r.class.as_str(), r)).collect();
    if zs.len() != zs_rows.len()
        || rows.len() != zs.len()
        || rows.iter().any(|r| !zs.contains_key(r.class.as_str()))
    {
        return Err(Error::Configuration(
            "method and zero-shot rows cover different classes".into(),
        ));
    }
    let zero: Vec<&str> = rows
        .iter()
        .map(|r| r.class.as_str())
        .filter(|c| zs[c].mean_iou == 0.0)
        .collect();
    if !zero.is_empty() {
        return Err(Error::Numeric(format!(
            "zero-shot IoU is zero for: {}",
            zero.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let z = zs[r.class.as_str()];
        if z.n_queries != r.n_queries {
            return Err(Error::Configuration(format!(
                "class {} evaluated on {} queries but zero-shot on {}",
                r.class, r.n_queries, z.n_queries
            )));
        }
        out.push(ReportRow {
            relative_gain: Some((r.mean_iou - z.mean_iou) / z.mean_iou),
            ..r.clone()
        });
    }
    let n = out.len() as f64;
    Ok(GainSummary {
        mean_iou: out.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        mean_relative_gain: out
            .iter()
            .map(|r| r.relative_gain.expect("set above"))
            .sum::<f64>()
            / n,
        rows: out,
    })
}

/// Writes `pred_<i>.binvox` / `gt_<i>.binvox` pairs for the given samples,
/// thresholded at `opts.threshold`.
pub fn export_predictions<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    samples: &[usize],
    opts: EvalOptions,
    dir: &Path,
) -> Result<()> {
    for &i in samples {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Lookup(format!("sample {i} is not in the dataset")))?;
        let field = crate::train::predict(model, data, i, &s.class)?;
        save_binvox(
            &dir.join(format!("pred_{i:05}.binvox")),
            &threshold(&field, opts.threshold)?,
        )?;
        save_binvox(
            &dir.join(format!("gt_{i:05}.binvox")),
            &data.shapes[s.shape],
        )?;
    }
    Ok(())
}
