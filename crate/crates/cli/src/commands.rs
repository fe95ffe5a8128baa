use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use shapeprior::distill::MiniSpec;
use shapeprior::eval::{
    emit_report, evaluate, export_predictions, relative_gain, run_ablation, train_method,
    AblationKind, AblationSpec, EvalOptions, Experiment, Method, ReportFormat, ReportProvenance,
    ReportRow,
};
use shapeprior::model::{ClassRole, Model, ModelConfig};
use shapeprior::nn::{write_atomic, Checkpoint, OptimizerKind};
use shapeprior::seed::derive_seed;
use shapeprior::synth::{
    build_dataset, Dataset, DatasetManifest, RenderParams, Split, SynthClassSpec,
};
use shapeprior::train::{
    adapt_novel, onn_scores, AdaptConfig, FewShotEpisode, OnnK, RunDescriptor, TrainConfig,
};
use shapeprior::voxel::VoxelGrid;

use crate::config::ConfigFile;
use crate::{
    AblateArgs, AdaptArgs, AdaptFlags, CliError, DistillArgs, EvalArgs, GenDataArgs, OnnArgs,
    TrainArgs, TrainingFlags,
};

type Result<T> = std::result::Result<T, CliError>;

fn required<T: DeserializeOwned>(cfg: &ConfigFile, flag: Option<T>, key: &str) -> Result<T> {
    cfg.pick_opt(flag, key)?.ok_or_else(|| {
        CliError::Config(format!(
            "--{key} is required (flag, SHAPEPRIOR_* variable or config file)"
        ))
    })
}

fn parse<T: std::str::FromStr<Err = shapeprior::Error>>(s: &str) -> Result<T> {
    Ok(s.parse::<T>()?)
}

fn load_data(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = DatasetManifest::load(path)?;
    let data = Dataset::load(&m, None)?;
    Ok((m, data))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(Model::<f32>::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn save_model(model: &Model<f32>, path: &Path, descriptor: &RunDescriptor) -> Result<()> {
    model.to_checkpoint().save(path)?;
    descriptor.save(path)?;
    Ok(())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes)?,
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| shapeprior::Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn class_list(cfg: &ConfigFile, flag: Vec<String>) -> Result<Option<Vec<String>>> {
    if !flag.is_empty() {
        return Ok(Some(flag));
    }
    cfg.get::<Vec<String>>("classes")
}

fn report_format(cfg: &ConfigFile, flag: Option<String>) -> Result<ReportFormat> {
    parse(&cfg.pick(flag, "format", "csv".to_string())?)
}

fn eval_options(cfg: &ConfigFile, threshold: Option<f64>) -> Result<EvalOptions> {
    Ok(EvalOptions {
        threshold: cfg.pick(threshold, "threshold", EvalOptions::default().threshold)?,
        ..EvalOptions::default()
    })
}

pub fn gen_data(a: GenDataArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "gen-data")?;
    let out: PathBuf = required(&cfg, a.out, "out")?;
    let resolution = cfg.pick(a.resolution, "resolution", 16)?;
    let specs: Vec<SynthClassSpec> = match cfg.pick_opt(a.classes_file, "classes-file")? {
        Some(p) => {
            let bytes = std::fs::read(&p).map_err(|e| shapeprior::Error::io(&p, e))?;
            serde_json::from_slice(&bytes).map_err(shapeprior::Error::from)?
        }
        None => shapeprior::eval::reference_classes(resolution),
    };
    let render = RenderParams {
        image_size: cfg.pick(a.image_size, "image-size", 32)?,
        ..RenderParams::default()
    };
    let m = build_dataset(
        &specs,
        cfg.pick(a.shapes_per_class, "shapes-per-class", 40)?,
        cfg.pick(a.views, "views", 2)?,
        cfg.pick(a.split, "split", 0.8)?,
        cfg.pick(a.seed, "seed", 0)?,
        &render,
        resolution,
        &out,
    )?;
    println!(
        "{} ({} entries)",
        out.join("manifest.jsonl").display(),
        m.entries.len()
    );
    Ok(())
}

pub fn distill(a: DistillArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "distill")?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let out: PathBuf = required(&cfg, a.out, "out")?;
    let defaults = MiniSpec::default();
    let spec = MiniSpec {
        k: cfg.pick(a.k, "k", defaults.k)?,
        views: cfg.pick(a.views, "views", defaults.views)?,
        seed: cfg.pick(a.seed, "seed", defaults.seed)?,
    };
    let cache: Option<PathBuf> = cfg.pick_opt(a.cache_dir, "cache-dir")?;
    if let Some(c) = &cache {
        std::fs::create_dir_all(c).map_err(|e| shapeprior::Error::io(c, e))?;
    }
    let source = DatasetManifest::load(&manifest)?;
    let mut mini = shapeprior::distill::distill(&source, &spec, cache.as_deref())?;
    let out_dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir).map_err(|e| shapeprior::Error::io(out_dir, e))?;
    let same_root = out_dir.canonicalize().ok() == source.root.canonicalize().ok();
    if !same_root {
        let root = source
            .root
            .canonicalize()
            .map_err(|e| shapeprior::Error::io(&source.root, e))?;
        for e in &mut mini.entries {
            e.image = root.join(&e.image).to_string_lossy().into_owned();
            e.shape = root.join(&e.shape).to_string_lossy().into_owned();
        }
    }
    mini.save(&out)?;
    println!("{} ({} entries)", out.display(), mini.entries.len());
    Ok(())
}

fn model_template(cfg: &ConfigFile, t: &TrainingFlags, base: ModelConfig) -> Result<ModelConfig> {
    Ok(ModelConfig {
        embedding_dim: cfg.pick(t.embedding_dim, "embedding-dim", base.embedding_dim)?,
        encoder_width: cfg.pick(t.encoder_width, "encoder-width", base.encoder_width)?,
        decoder_width: cfg.pick(t.decoder_width, "decoder-width", base.decoder_width)?,
        blocks_per_stage: cfg.pick(
            t.blocks_per_stage,
            "blocks-per-stage",
            base.blocks_per_stage,
        )?,
        codebooks: cfg.pick(t.codebooks, "codebooks", base.codebooks)?,
        codes_per_book: cfg.pick(t.codes_per_book, "codes-per-book", base.codes_per_book)?,
        ..base
    })
}

fn train_config(cfg: &ConfigFile, t: &TrainingFlags, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let optimizer = match cfg.pick_opt(t.optimizer.clone(), "optimizer")? {
        None => d.optimizer,
        Some(s) => {
            serde_json::from_value::<OptimizerKind>(serde_json::Value::String(s.replace('-', "_")))
                .map_err(|_| CliError::Config(format!("unknown optimizer {s:?}")))?
        }
    };
    Ok(TrainConfig {
        epochs: cfg.pick(t.epochs, "epochs", d.epochs)?,
        optimizer,
        learning_rate: cfg.pick(t.lr, "lr", d.learning_rate)?,
        batch_size: cfg.pick(t.batch_size, "batch-size", d.batch_size)?,
        prior_subset: cfg.pick_opt(t.prior_subset, "prior-subset")?,
        seed,
        ..d
    })
}

/// `lr_alias` is `adapt --lr`; in that subcommand `lr` is also accepted as a
/// config key.
fn adapt_config(
    cfg: &ConfigFile,
    a: &AdaptFlags,
    lr_alias: Option<Option<f64>>,
) -> Result<AdaptConfig> {
    let d = AdaptConfig::default();
    let lr = match cfg.pick_opt(a.adapt_lr.or(lr_alias.flatten()), "adapt-lr")? {
        Some(v) => v,
        None if lr_alias.is_some() => cfg.pick(None, "lr", d.learning_rate)?,
        None => d.learning_rate,
    };
    Ok(AdaptConfig {
        steps: cfg.pick(a.steps, "steps", d.steps)?,
        learning_rate: lr,
        momentum: cfg.pick(a.momentum, "momentum", d.momentum)?,
        patience: cfg.pick(a.patience, "patience", d.patience)?,
        ..d
    })
}

pub fn train(a: TrainArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "train")?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let out: PathBuf = required(&cfg, a.out, "out")?;
    let method: Method = parse(&cfg.pick(a.variant, "variant", "zs".to_string())?)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let (_, data) = load_data(&manifest)?;
    let base = ModelConfig {
        resolution: data.resolution,
        image_size: data.image_size,
        ..ModelConfig::default()
    };
    let exp = Experiment {
        model: model_template(&cfg, &a.training, base)?,
        train: train_config(&cfg, &a.training, seed)?,
        adapt: AdaptConfig::default(),
        shots: 1,
        eval: EvalOptions::default(),
    };
    let (model, curve) = train_method(method, &exp, &data, seed)?;
    if let Some(p) = cfg.pick_opt(a.curve, "curve")? {
        write_atomic(&p, curve.to_csv().as_bytes())?;
    }
    let last = curve.records.last().expect("at least one epoch");
    let descriptor = RunDescriptor {
        variant: method.variant(),
        manifest,
        seed,
        model: model.config().clone(),
        train: Some(TrainConfig { seed, ..exp.train }),
        adapt: None,
        notes: serde_json::json!({ "method": method.name(), "final_loss": last.loss, "final_train_iou": last.mean_iou }),
    };
    save_model(&model, &out, &descriptor)?;
    println!(
        "{method}: {} epochs, final loss {:.6}, train IoU {:.4} -> {}",
        curve.records.len(),
        last.loss,
        last.mean_iou,
        out.display()
    );
    Ok(())
}

pub fn adapt(a: AdaptArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "adapt")?;
    let checkpoint: PathBuf = required(&cfg, a.checkpoint, "checkpoint")?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let out: PathBuf = required(&cfg, a.out, "out")?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let shots = cfg.pick(a.adapt.shots, "shots", 1)?;
    let ac = adapt_config(&cfg, &a.adapt, Some(a.lr))?;
    let mut model = load_model(&checkpoint)?;
    let (_, data) = load_data(&manifest)?;
    let classes = match class_list(&cfg, a.classes)? {
        Some(c) => c,
        None => {
            let c = cfg.get::<Vec<String>>("class")?;
            c.unwrap_or_else(|| data.classes(ClassRole::Novel))
        }
    };
    let mut reports = Vec::new();
    for c in &classes {
        let ep = FewShotEpisode::sample(&data, c, shots, derive_seed(seed, &["episode"]))?;
        let r = adapt_novel(&mut model, &data, &ep, &ac)?;
        println!(
            "{}",
            serde_json::to_string(&r).map_err(shapeprior::Error::from)?
        );
        reports.push(r);
    }
    let mut descriptor = RunDescriptor::load(&checkpoint).unwrap_or_else(|_| RunDescriptor {
        variant: model.variant(),
        manifest: manifest.clone(),
        seed,
        model: model.config().clone(),
        train: None,
        adapt: None,
        notes: serde_json::Value::Null,
    });
    descriptor.adapt = Some(ac);
    let mut notes = match descriptor.notes.take() {
        serde_json::Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    notes.insert("shots".into(), shots.into());
    notes.insert("episode_seed".into(), seed.into());
    notes.insert(
        "adapted".into(),
        serde_json::to_value(&reports).map_err(shapeprior::Error::from)?,
    );
    descriptor.notes = serde_json::Value::Object(notes);
    save_model(&model, &out, &descriptor)?;
    Ok(())
}

fn method_label(checkpoint: &Path, model: &Model<f32>) -> (String, usize) {
    let notes = RunDescriptor::load(checkpoint)
        .map(|d| d.notes)
        .unwrap_or_default();
    let method = notes
        .get("method")
        .and_then(|m| m.as_str())
        .map(String::from)
        .unwrap_or_else(|| match model.variant() {
            shapeprior::priors::PriorKind::None => Method::Zs.name(),
            v => Method::Prior(v).name(),
        });
    let shots = notes.get("shots").and_then(|s| s.as_u64()).unwrap_or(0) as usize;
    (method, shots)
}

fn provenance(
    model: &Model<f32>,
    checkpoint: Option<&Path>,
    manifest: &Path,
    opts: EvalOptions,
) -> ReportProvenance {
    let mut p = ReportProvenance::new(model.config(), opts.threshold);
    p.checkpoint = checkpoint.map(Path::to_path_buf);
    p.manifest = Some(manifest.to_path_buf());
    if let Some(c) = checkpoint {
        if let Ok(d) = RunDescriptor::load(c) {
            p.notes = serde_json::to_value(d).unwrap_or_default();
        }
    }
    p
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "eval")?;
    let checkpoint: PathBuf = required(&cfg, a.checkpoint, "checkpoint")?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let opts = eval_options(&cfg, a.threshold)?;
    let format = report_format(&cfg, a.format)?;
    let out: Option<PathBuf> = cfg.pick_opt(a.out, "out")?;
    let model = load_model(&checkpoint)?;
    let (_, data) = load_data(&manifest)?;
    let classes = class_list(&cfg, a.classes)?;
    let (label, shots) = method_label(&checkpoint, &model);
    let method = cfg.pick(a.method, "method", label)?;
    let mut rows = evaluate(&model, &data, classes.as_deref(), &method, shots, opts)?;
    if let Some(zs_path) = cfg.pick_opt::<PathBuf>(a.zs, "zs")? {
        let zs = load_model(&zs_path)?;
        let zs_rows = evaluate(&zs, &data, classes.as_deref(), "zs", 0, opts)?;
        rows = relative_gain(&rows, &zs_rows)?.rows;
    }
    if let Some(dir) = cfg.pick_opt::<PathBuf>(a.export_dir, "export-dir")? {
        std::fs::create_dir_all(&dir).map_err(|e| shapeprior::Error::io(&dir, e))?;
        let names: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
        let samples = data.select(|s| s.split == Split::Test && names.contains(&s.class));
        export_predictions(&model, &data, &samples, opts, &dir)?;
    }
    write_output(out.as_deref(), &emit_report(&rows, format)?)?;
    if let Some(o) = &out {
        provenance(&model, Some(&checkpoint), &manifest, opts).save(o)?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "ablate")?;
    let kind: AblationKind = parse(&required::<String>(&cfg, a.kind, "kind")?)?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let opts = eval_options(&cfg, a.threshold)?;
    let format = report_format(&cfg, a.format)?;
    let out: Option<PathBuf> = cfg.pick_opt(a.out, "out")?;
    let checkpoint: Option<PathBuf> = cfg.pick_opt(a.checkpoint, "checkpoint")?;
    let (_, data) = load_data(&manifest)?;
    let model = match &checkpoint {
        Some(p) => load_model(p)?,
        None if kind == AblationKind::PlacementSweep => {
            let base = ModelConfig {
                resolution: data.resolution,
                image_size: data.image_size,
                ..ModelConfig::default()
            };
            let refs: Vec<String> = data.classes(ClassRole::Base);
            let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
            Model::<f32>::new(model_template(&cfg, &a.training, base)?, &refs)?
        }
        None => {
            return Err(CliError::Config(
                "--checkpoint is required for this ablation".into(),
            ))
        }
    };
    let sweep = (kind == AblationKind::PlacementSweep)
        .then(|| -> Result<Experiment> {
            Ok(Experiment {
                model: model_template(&cfg, &a.training, model.config().clone())?,
                train: train_config(&cfg, &a.training, seed)?,
                adapt: adapt_config(&cfg, &a.adapt, None)?,
                shots: cfg.pick(a.adapt.shots, "shots", 1)?,
                eval: opts,
            })
        })
        .transpose()?;
    let spec = AblationSpec {
        kind,
        seed,
        classes: class_list(&cfg, a.classes)?,
        eval: opts,
        sweep,
    };
    let report = run_ablation(&model, &spec, &data)?;
    for k in &report.knockout {
        eprintln!(
            "{} codebook {}: IoU {:.4} -> {:.4}, {:.1} voxels changed",
            k.class, k.codebook, k.baseline_iou, k.mean_iou, k.mean_voxel_diff
        );
    }
    write_output(out.as_deref(), &emit_report(&report.rows, format)?)?;
    if let Some(o) = &out {
        let mut p = provenance(&model, checkpoint.as_deref(), &manifest, opts);
        p.notes = serde_json::json!({ "ablation": report.kind, "knockout": report.knockout, "run": p.notes });
        p.save(o)?;
    }
    Ok(())
}

pub fn onn(a: OnnArgs, config: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(config, "onn")?;
    let manifest: PathBuf = required(&cfg, a.manifest, "manifest")?;
    let shots = cfg.pick(a.shots, "shots", "1".to_string())?;
    let k = match shots.as_str() {
        "full" => OnnK::Full,
        s => OnnK::Count(s.parse().map_err(|_| {
            CliError::Config(format!("--shots must be a count or `full`, not {s:?}"))
        })?),
    };
    let episodes = cfg.pick(a.episodes, "episodes", 100)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let format = report_format(&cfg, a.format)?;
    let out: Option<PathBuf> = cfg.pick_opt(a.out, "out")?;
    let (_, data) = load_data(&manifest)?;
    let classes = class_list(&cfg, a.classes)?.unwrap_or_else(|| data.classes(ClassRole::Novel));
    let mut rows = Vec::new();
    for c in &classes {
        if !data.roles.contains_key(c) {
            return Err(
                shapeprior::Error::Lookup(format!("class {c} is not in the dataset")).into(),
            );
        }
        let db: Vec<VoxelGrid> = data
            .shapes_of(c, Split::Train)
            .iter()
            .map(|&i| data.shapes[i].clone())
            .collect();
        let queries: Vec<&VoxelGrid> = data
            .shapes_of(c, Split::Test)
            .iter()
            .map(|&i| &data.shapes[i])
            .collect();
        if queries.is_empty() {
            return Err(
                shapeprior::Error::Configuration(format!("class {c} has no test shapes")).into(),
            );
        }
        let scores = onn_scores(&queries, &db, k, episodes, derive_seed(seed, &["onn", c]))?;
        rows.push(ReportRow {
            class: c.clone(),
            method: format!("onn-{shots}"),
            shots: match k {
                OnnK::Count(n) => n,
                OnnK::Full => db.len(),
            },
            mean_iou: scores.iter().sum::<f64>() / scores.len() as f64,
            relative_gain: None,
            n_queries: scores.len(),
        });
    }
    write_output(out.as_deref(), &emit_report(&rows, format)?)?;
    Ok(())
}
