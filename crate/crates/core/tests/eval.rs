//! Evaluation, ablations and reports on a small trained model.

mod common;

use shapeprior::eval::{
    codebook_knockout, emit_report, evaluate, gce_rand, parse_csv_report, parse_markdown_report,
    placement_sweep, relative_gain, run_ablation, AblationKind, AblationSpec, EvalOptions,
    Experiment, ReportFormat, ReportRow,
};
use shapeprior::model::{ClassRole, Model};
use shapeprior::nn::Module;
use shapeprior::priors::PriorKind;
use shapeprior::synth::{build_dataset, Dataset, Family, RenderParams, Split, SynthClassSpec};
use shapeprior::train::{adapt_novel, train_base, AdaptConfig, FewShotEpisode, TrainConfig};
use shapeprior::Error;

fn tiny_data(dir: &std::path::Path) -> Dataset {
    let specs = vec![
        SynthClassSpec::new("a", Family::BoxStack, ClassRole::Base, 8, 0),
        SynthClassSpec::new("b", Family::Cylinder, ClassRole::Base, 8, 1),
        SynthClassSpec::new("n", Family::Ring, ClassRole::Novel, 8, 2),
    ];
    let params = RenderParams {
        image_size: 8,
        ..RenderParams::default()
    };
    let m = build_dataset(&specs, 6, 2, 0.5, 4, &params, 8, dir).unwrap();
    Dataset::load(&m, None).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn quick_adapt() -> AdaptConfig {
    AdaptConfig {
        steps: 3,
        learning_rate: 0.05,
        ..AdaptConfig::default()
    }
}

fn adapted(variant: PriorKind, data: &Dataset) -> Model<f32> {
    let mut model = Model::<f32>::new(common::tiny_config(variant, 3), &["a", "b"]).unwrap();
    let samples = data.select(|s| s.split == Split::Train && s.class != "n");
    train_base(&mut model, data, &samples, &quick_train()).unwrap();
    if variant.is_conditioned() {
        let ep = FewShotEpisode::sample(data, "n", 2, 0).unwrap();
        adapt_novel(&mut model, data, &ep, &quick_adapt()).unwrap();
    }
    model
}

fn classes(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn evaluation_is_deterministic_and_partitions_recombine() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let model = adapted(PriorKind::Gce, &data);
    let all = evaluate(&model, &data, None, "gce", 2, EvalOptions::default()).unwrap();
    assert_eq!(
        all,
        evaluate(&model, &data, None, "gce", 2, EvalOptions::default()).unwrap()
    );
    assert_eq!(
        all.iter().map(|r| r.class.as_str()).collect::<Vec<_>>(),
        ["a", "b", "n"]
    );
    let single = EvalOptions {
        batch: 1,
        ..EvalOptions::default()
    };
    assert_eq!(
        all,
        evaluate(&model, &data, None, "gce", 2, single).unwrap()
    );

    let mut parts = evaluate(&model, &data, Some(&classes(&["n", "a"])), "gce", 2, single).unwrap();
    parts.extend(evaluate(&model, &data, Some(&classes(&["b"])), "gce", 2, single).unwrap());
    parts.sort_by(|x, y| x.class.cmp(&y.class));
    assert_eq!(parts, all);
    let n: usize = all.iter().map(|r| r.n_queries).sum();
    assert_eq!(n, data.select(|s| s.split == Split::Test).len());
}

#[test]
fn evaluation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = tiny_data(dir.path());
    let mut model =
        Model::<f32>::new(common::tiny_config(PriorKind::Cgce, 0), &["a", "b"]).unwrap();
    match evaluate(&model, &data, None, "cgce", 1, EvalOptions::default()) {
        Err(Error::Lookup(msg)) => assert!(msg.contains('n'), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        evaluate(
            &model,
            &data,
            Some(&classes(&["zzz"])),
            "cgce",
            1,
            EvalOptions::default()
        ),
        Err(Error::Lookup(_))
    ));
    model.add_novel_class("n").unwrap();
    data.samples
        .retain(|s| !(s.class == "n" && s.split == Split::Test));
    assert!(matches!(
        evaluate(
            &model,
            &data,
            Some(&classes(&["n"])),
            "cgce",
            1,
            EvalOptions::default()
        ),
        Err(Error::Configuration(_))
    ));
    let bad = EvalOptions {
        threshold: 1.5,
        ..EvalOptions::default()
    };
    assert!(evaluate(&model, &data, Some(&classes(&["a"])), "cgce", 1, bad).is_err());
}

#[test]
fn random_class_conditioning() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let model = adapted(PriorKind::Gce, &data);
    let rows = gce_rand(&model, &data, None, 5, EvalOptions::default()).unwrap();
    assert_eq!(
        rows,
        gce_rand(&model, &data, None, 5, EvalOptions::default()).unwrap()
    );
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.method == "gce-rand"));
    let reference = evaluate(&model, &data, None, "gce", 0, EvalOptions::default()).unwrap();
    for (r, z) in rows.iter().zip(&reference) {
        assert_eq!(r.n_queries, z.n_queries);
    }

    let zs = adapted(PriorKind::None, &data);
    assert!(matches!(
        gce_rand(&zs, &data, None, 5, EvalOptions::default()),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn knockout_of_a_zeroed_codebook_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let mut model = adapted(PriorKind::Cgce, &data);
    let cfg = model.config().clone();
    let book = cfg.codes_per_book * cfg.embedding_dim;
    model.visit_mut("", &mut |name, p| {
        if name == "priors/cgce/codes" {
            p.value.data_mut()[book..2 * book].fill(0.0);
        }
    });
    let rows = codebook_knockout(&model, &data, None, EvalOptions::default()).unwrap();
    assert_eq!(rows.len(), 3 * cfg.codebooks);
    for r in &rows {
        if r.codebook == 2 {
            assert_eq!(r.mean_voxel_diff, 0.0, "{r:?}");
            assert_eq!(r.mean_iou, r.baseline_iou);
        }
    }

    let gce = adapted(PriorKind::Gce, &data);
    assert!(matches!(
        codebook_knockout(&gce, &data, None, EvalOptions::default()),
        Err(Error::Configuration(_))
    ));
    let spec = AblationSpec {
        kind: AblationKind::CodebookKnockout,
        seed: 0,
        classes: None,
        eval: EvalOptions::default(),
        sweep: None,
    };
    assert!(matches!(
        run_ablation(&gce, &spec, &data),
        Err(Error::Configuration(_))
    ));
    let report = run_ablation(&model, &spec, &data).unwrap();
    assert_eq!(report.rows.len(), report.knockout.len());
}

#[test]
fn placement_sweep_covers_every_placement() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let exp = Experiment {
        model: common::tiny_config(PriorKind::None, 0),
        train: TrainConfig {
            epochs: 1,
            ..quick_train()
        },
        adapt: AdaptConfig {
            steps: 1,
            ..quick_adapt()
        },
        shots: 1,
        eval: EvalOptions::default(),
    };
    let rows = placement_sweep(&exp, &data, 2).unwrap();
    assert_eq!(rows.len(), 8);
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        [
            "mcce-enc",
            "mcce-dec",
            "mcce-full",
            "cab-enc",
            "cab-dec",
            "cab-full",
            "cgce",
            "hybrid"
        ]
    );
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_iou)));
}

#[test]
fn reports_round_trip() {
    let zs = vec![
        ReportRow {
            class: "a".into(),
            method: "zs".into(),
            shots: 0,
            mean_iou: 0.69,
            relative_gain: None,
            n_queries: 10,
        },
        ReportRow {
            class: "b".into(),
            method: "zs".into(),
            shots: 0,
            mean_iou: 0.09,
            relative_gain: None,
            n_queries: 4,
        },
    ];
    let m: Vec<ReportRow> = zs
        .iter()
        .zip([0.7, 0.21])
        .map(|(r, v)| ReportRow {
            method: "wallace".into(),
            shots: 1,
            mean_iou: v,
            ..r.clone()
        })
        .collect();
    let g = relative_gain(&m, &zs).unwrap();
    let csv = emit_report(&g.rows, ReportFormat::Csv).unwrap();
    assert_eq!(
        parse_csv_report(std::str::from_utf8(&csv).unwrap()).unwrap(),
        g.rows
    );
    assert_eq!(csv, emit_report(&g.rows, ReportFormat::Csv).unwrap());
    let md = emit_report(&g.rows, ReportFormat::Markdown).unwrap();
    assert_eq!(
        parse_markdown_report(std::str::from_utf8(&md).unwrap()).unwrap(),
        g.rows
    );
    assert_eq!(
        parse_csv_report(
            std::str::from_utf8(&emit_report(&zs, ReportFormat::Csv).unwrap()).unwrap()
        )
        .unwrap(),
        zs
    );
    assert!(matches!(
        emit_report(&[], ReportFormat::Csv),
        Err(Error::Parameter(_))
    ));
}
