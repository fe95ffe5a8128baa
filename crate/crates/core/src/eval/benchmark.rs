use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{relative_gain, Experiment, GainSummary, Method, MethodRun, ReportRow};
use crate::error::{Error, Result};
use crate::model::ClassRole;
use crate::synth::{
    build_dataset, Dataset, DatasetManifest, Family, ParamRange, RenderParams, SynthClassSpec,
};

/// The reference synthetic benchmark: four base families and four novel
/// classes, two of them variants of base families and two unseen families.
pub fn reference_classes(resolution: usize) -> Vec<SynthClassSpec> {
    let r = resolution as f64;
    let base =
        |id: &str, f: Family, s: u64| SynthClassSpec::new(id, f, ClassRole::Base, resolution, s);
    let novel =
        |id: &str, f: Family, s: u64| SynthClassSpec::new(id, f, ClassRole::Novel, resolution, s);
    vec![
        base("stack", Family::BoxStack, 1),
        base("table", Family::TableLike, 2),
        base("cylinder", Family::Cylinder, 3),
        base("bracket", Family::LBracket, 4),
        novel("tower", Family::BoxStack, 5)
            .with_range(
                "width",
                ParamRange::new((0.3 * r).max(1.0), (0.45 * r).max(1.0)),
            )
            .with_range(
                "depth",
                ParamRange::new((0.3 * r).max(1.0), (0.45 * r).max(1.0)),
            )
            .with_range("levels", ParamRange::fixed(3.0))
            .with_range(
                "level_height",
                ParamRange::new((0.2 * r).max(1.0), (0.28 * r).max(1.0)),
            )
            .with_range("shrink", ParamRange::new(0.0, 0.06 * r)),
        novel("bench", Family::TableLike, 6)
            .with_range(
                "height",
                ParamRange::new((0.2 * r).max(1.0), (0.35 * r).max(1.0)),
            )
            .with_range(
                "depth",
                ParamRange::new((0.25 * r).max(1.0), (0.4 * r).max(1.0)),
            ),
        novel("ring", Family::Ring, 7),
        novel("wing", Family::WingBody, 8),
    ]
}

/// Size of the generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkData {
    pub resolution: usize,
    pub image_size: usize,
    pub shapes_per_class: usize,
    pub views: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl BenchmarkData {
    pub fn build(&self, dir: &Path) -> Result<(DatasetManifest, Dataset)> {
        let params = RenderParams {
            image_size: self.image_size,
            ..RenderParams::default()
        };
        let m = build_dataset(
            &reference_classes(self.resolution),
            self.shapes_per_class,
            self.views,
            self.split_ratio,
            self.seed,
            &params,
            self.resolution,
            dir,
        )?;
        let data = Dataset::load(&m, None)?;
        Ok((m, data))
    }
}

/// Novel-class rows of every method for one seed, with gains over ZS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub zs: Vec<ReportRow>,
    pub methods: Vec<(Method, GainSummary)>,
}

impl SeedResult {
    pub fn gain(&self, m: Method) -> Option<f64> {
        self.methods
            .iter()
            .find(|(x, _)| *x == m)
            .map(|(_, g)| g.mean_relative_gain)
    }
}

/// Trains ZS and every method in `methods` for one seed and compares their
/// novel-class IoU. `on_run` sees each finished run.
pub fn run_seed(
    exp: &Experiment,
    data: &Dataset,
    methods: &[Method],
    seed: u64,
    mut on_run: impl FnMut(&MethodRun),
) -> Result<SeedResult> {
    if methods.contains(&Method::Zs) {
        return Err(Error::Configuration(
            "ZS is the reference and is always run".into(),
        ));
    }
    let zs = MethodRun::run(Method::Zs, exp, data, seed)?;
    on_run(&zs);
    let mut out = Vec::new();
    for &m in methods {
        let run = MethodRun::run(m, exp, data, seed)?;
        on_run(&run);
        out.push((m, relative_gain(&run.novel, &zs.novel)?));
    }
    Ok(SeedResult {
        seed,
        zs: zs.novel,
        methods: out,
    })
}
