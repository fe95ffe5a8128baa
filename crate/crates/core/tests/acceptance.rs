//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (run with `--nocapture` to see them) before asserting.
//!
//! The few-shot benchmark behind the ordering, random-conditioning and
//! retrieval checks is trained once and shared between those tests.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeprior::distill::{kmedoids, kmedoids_with_restarts, pairwise_distances, DistanceMatrix};
use shapeprior::eval::{
    evaluate, gce_rand, run_seed, BenchmarkData, EvalOptions, Experiment, Method, MethodRun,
};
use shapeprior::model::{class_of_param, ClassRole, GradMode, Model, ModelConfig};
use shapeprior::nn::{bce_with_logits, sparsemax, Checkpoint, Tensor};
use shapeprior::priors::PriorKind;
use shapeprior::synth::{
    build_dataset, generate_class, Dataset, Family, RenderParams, Split, SynthClassSpec,
};
use shapeprior::train::{
    adapt_novel, mean_iou, onn_scores, predict, train_base, train_base_with, AdaptConfig,
    FewShotEpisode, OnnK, TrainConfig,
};
use shapeprior::voxel::{iou, proximity_class, read_binvox, write_binvox, VoxelGrid};

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Euclidean projection onto the simplex by trying every support set.
fn simplex_projection(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let consistent = (0..n).all(|i| {
            if support.contains(&i) {
                z[i] > tau
            } else {
                z[i] <= tau
            }
        });
        if consistent {
            return z.iter().map(|&v| (v - tau).max(0.0)).collect();
        }
    }
    unreachable!("some support set is always consistent")
}

#[test]
fn sparsemax_matches_support_enumeration() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut shift_mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = sparsemax(&z).unwrap();
        for (a, b) in p.iter().zip(simplex_projection(&z)) {
            worst = worst.max((a - b).abs());
        }

        let dyadic: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-64i32..=64) as f64 / 16.0)
            .collect();
        let c = rng.random_range(-100i32..=100) as f64;
        let shifted: Vec<f64> = dyadic.iter().map(|v| v + c).collect();
        let a: Vec<u64> = sparsemax(&dyadic)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = sparsemax(&shifted)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        if a != b {
            shift_mismatches += 1;
        }
    }
    let elapsed = secs(t.elapsed());
    verdict(
        "sparsemax oracle",
        worst <= 1e-8 && shift_mismatches == 0 && elapsed < 10.0,
        format!("max abs error {worst:e}, {shift_mismatches} shift mismatches, {elapsed:.2}s"),
    );
}

fn model_check(variant: PriorKind) -> f64 {
    let (mut model, images, targets, classes) = common::tiny_setup(variant, 23);
    let all = |_: &str| true;
    common::grads_of(&mut model, &images, &classes, &targets, true, GradMode::ALL);
    let g = common::gather_grad(&model, &all);
    let loss = |m: &Model<f64>| common::loss_of(m, &images, &classes, &targets, true);
    common::directional_check(&mut model, &all, &g, &loss, 50, 29)
}

fn bce_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, r) = (3, 4);
    let logits: Vec<f64> = (0..n * r * r * r)
        .map(|_| rng.random_range(-4.0..4.0))
        .collect();
    let targets: Vec<VoxelGrid> = (0..n)
        .map(|_| common::random_grid(r, 0.4, &mut rng))
        .collect();
    let refs: Vec<&VoxelGrid> = targets.iter().collect();
    let loss = |v: &[f64]| {
        bce_with_logits(&Tensor::from_vec(&[n, r, r, r], v.to_vec()).unwrap(), &refs).unwrap()
    };
    let (_, grad) = loss(&logits);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d: Vec<f64> = (0..logits.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let plus: Vec<f64> = logits.iter().zip(&d).map(|(x, e)| x + h * e).collect();
        let minus: Vec<f64> = logits.iter().zip(&d).map(|(x, e)| x - h * e).collect();
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
        let an: f64 = grad.data().iter().zip(&d).map(|(g, e)| g * e).sum();
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
    }
    worst
}

#[test]
fn finite_difference_gradients() {
    let t = Instant::now();
    let checks = [
        ("bce", bce_check()),
        ("conditional batch norm", model_check(PriorKind::McceFull)),
        ("attention modulation", model_check(PriorKind::CabFull)),
        ("codebook composition", model_check(PriorKind::Cgce)),
        ("encoder-decoder", model_check(PriorKind::None)),
    ];
    let elapsed = secs(t.elapsed());
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        "gradient checks",
        worst <= 1e-4 && elapsed < 300.0,
        format!("{}, {elapsed:.1}s", detail.join(", ")),
    );
}

#[test]
fn iou_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let pa = rng.random_range(0.0..1.0);
        let pb = rng.random_range(0.0..1.0);
        let a = common::random_grid(8, pa, &mut rng);
        let b = common::random_grid(8, pb, &mut rng);
        let (mut inter, mut union) = (0usize, 0usize);
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    let (u, v) = (a.get(x, y, z), b.get(x, y, z));
                    inter += (u && v) as usize;
                    union += (u || v) as usize;
                }
            }
        }
        let expected = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        if iou(&a, &b).unwrap() != expected {
            mismatches += 1;
        }
    }
    // two voxels each, sharing one
    let mut a = VoxelGrid::empty(8).unwrap();
    let mut b = VoxelGrid::empty(8).unwrap();
    a.set(0, 0, 0, true);
    a.set(1, 0, 0, true);
    b.set(1, 0, 0, true);
    b.set(2, 0, 0, true);
    let hand = iou(&a, &b).unwrap();
    verdict(
        "iou oracle",
        mismatches == 0 && hand == 1.0 / 3.0,
        format!("{mismatches} mismatches in 1000 pairs, hand case {hand}"),
    );
}

#[test]
fn binvox_round_trip_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut failures = 0;
    for _ in 0..1000 {
        let p = rng.random_range(0.0..1.0);
        let g = common::random_grid(32, p, &mut rng);
        let bytes = write_binvox(&g);
        let back = read_binvox(&bytes).unwrap();
        if back != g || write_binvox(&back) != bytes {
            failures += 1;
        }
    }
    let bytes = write_binvox(&VoxelGrid::empty(32).unwrap());
    let header = b"data\n";
    let start = bytes
        .windows(header.len())
        .position(|w| w == header)
        .unwrap()
        + header.len();
    let mut expected: Vec<u8> = [0u8, 255].repeat(128);
    expected.extend_from_slice(&[0, 128]);
    let layout = bytes[start..] == expected[..];
    verdict(
        "binvox",
        failures == 0 && layout,
        format!("{failures} round-trip failures in 1000 grids, all-zero layout matches: {layout}"),
    );
}

fn planted_instance(rng: &mut ChaCha8Rng) -> Vec<VoxelGrid> {
    let r = 6;
    let bases = [
        common::random_grid(r, 0.3, rng),
        common::random_grid(r, 0.3, rng),
    ];
    let total = rng.random_range(4..=12);
    (0..total)
        .map(|i| {
            let mut s = bases[i % 2].clone();
            for v in 0..r * r * r {
                if rng.random_bool(0.03) {
                    s.set_index(v, !s.get_index(v));
                }
            }
            s
        })
        .collect()
}

fn best_pair(d: &DistanceMatrix) -> f64 {
    let n = d.n();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            best = best.min((0..n).map(|i| d.get(i, a).min(d.get(i, b))).sum());
        }
    }
    best
}

#[test]
fn kmedoids_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut increases = 0;
    for trial in 0..200u64 {
        let n = rng.random_range(2..25);
        let shapes: Vec<VoxelGrid> = (0..n)
            .map(|_| common::random_grid(5, 0.4, &mut rng))
            .collect();
        let d = pairwise_distances(&shapes).unwrap();
        let k = rng.random_range(1..=n);
        for seed in 0..5 {
            let m = kmedoids_with_restarts(&d, k, trial * 10 + seed, 1).unwrap();
            increases += m.history.windows(2).filter(|w| w[1] > w[0]).count();
        }
    }

    let mut matched = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let d = pairwise_distances(&planted_instance(&mut rng)).unwrap();
        if (kmedoids(&d, 2, seed).unwrap().objective - best_pair(&d)).abs() <= 1e-9 {
            matched += 1;
        }
    }

    let d =
        DistanceMatrix::from_full(3, vec![0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0]).unwrap();
    let hand = kmedoids(&d, 1, 0).unwrap();
    let hand_ok = hand.indices == [1] && (hand.objective - 0.9).abs() < 1e-12;
    verdict(
        "k-medoids",
        increases == 0 && matched >= 95 && hand_ok,
        format!(
            "{increases} objective increases, {matched}/100 planted optima, hand case medoid {} objective {}",
            hand.indices[0] + 1,
            hand.objective
        ),
    );
}

fn small_dataset(dir: &std::path::Path) -> Dataset {
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

fn frozen_bits(ck: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    ck.arrays
        .iter()
        .filter(|(n, _)| class_of_param(n) != Some("n"))
        .map(|(n, a)| (n.clone(), a.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn adaptation_freezes_everything_but_the_novel_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let base = data.select(|s| s.class != "n");
    let mut broken = Vec::new();
    let mut checked = 0;
    for variant in PriorKind::ALL.into_iter().filter(|v| v.is_conditioned()) {
        let mut model = Model::<f32>::new(common::tiny_config(variant, 5), &["a", "b"]).unwrap();
        let samples = data.select(|s| s.split == Split::Train && s.class != "n");
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        train_base(&mut model, &data, &samples, &tc).unwrap();
        let preds = |m: &Model<f32>| -> Vec<u64> {
            base.iter()
                .flat_map(|&i| {
                    predict(m, &data, i, &data.samples[i].class)
                        .unwrap()
                        .probabilities()
                        .to_vec()
                })
                .map(f64::to_bits)
                .collect()
        };
        let before = model.to_checkpoint();
        let before_preds = preds(&model);
        let ep = FewShotEpisode::sample(&data, "n", 2, 1).unwrap();
        let cfg = AdaptConfig {
            steps: 5,
            learning_rate: 0.05,
            ..AdaptConfig::default()
        };
        adapt_novel(&mut model, &data, &ep, &cfg).unwrap();
        let after = model.to_checkpoint();
        let codes_same =
            before.arrays.get("priors/cgce/codes") == after.arrays.get("priors/cgce/codes");
        if frozen_bits(&before) != frozen_bits(&after)
            || !codes_same
            || before_preds != preds(&model)
        {
            broken.push(variant.to_string());
        }
        checked += 1;
    }
    verdict(
        "freeze contract",
        broken.is_empty(),
        format!("{checked} variants adapted, changed outside the novel class: {broken:?}"),
    );
}

#[test]
fn zs_overfits_a_small_training_set() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let specs = vec![
        SynthClassSpec::new("stack", Family::BoxStack, ClassRole::Base, 32, 1),
        SynthClassSpec::new("cyl", Family::Cylinder, ClassRole::Base, 32, 2),
    ];
    let params = RenderParams {
        image_size: 64,
        ..RenderParams::default()
    };
    let m = build_dataset(&specs, 10, 1, 0.5, 3, &params, 32, dir.path()).unwrap();
    let data = Dataset::load(&m, None).unwrap();
    let cfg = ModelConfig {
        variant: PriorKind::None,
        resolution: 32,
        image_size: 64,
        embedding_dim: 128,
        encoder_width: 0.25,
        decoder_width: 0.25,
        blocks_per_stage: 1,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, &["stack", "cyl"]).unwrap();
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let tc = TrainConfig {
        epochs: 200,
        learning_rate: 1e-4,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let curve = train_base_with(&mut model, &data, &all, &tc, |_, _| {}).unwrap();
    let last: Vec<f64> = curve
        .records
        .iter()
        .rev()
        .take(10)
        .map(|r| r.mean_iou)
        .collect();
    let window = last.iter().sum::<f64>() / last.len() as f64;
    let final_iou = mean_iou(&model, &data, &all, 10).unwrap();
    let elapsed = secs(t.elapsed());
    verdict(
        "overfit sanity",
        data.shapes.len() == 20 && window >= 0.9 && final_iou >= 0.9 && elapsed < 600.0,
        format!(
            "{} shapes, train IoU over the last 10 epochs {window:.3}, final eval-mode IoU {final_iou:.3}, {elapsed:.0}s",
            data.shapes.len()
        ),
    );
}

const SEEDS: u64 = 3;

struct SeedOutcome {
    wallace: f64,
    cgce: f64,
    hybrid: f64,
    zs_novel: Vec<(String, f64)>,
    gce_iou: f64,
    gce_rand_iou: f64,
}

struct Benchmark {
    data: Dataset,
    outcomes: Vec<SeedOutcome>,
    ordering_time: Duration,
}

fn benchmark_experiment() -> Experiment {
    Experiment {
        model: ModelConfig {
            variant: PriorKind::None,
            resolution: 16,
            image_size: 32,
            embedding_dim: 128,
            encoder_width: 0.25,
            decoder_width: 0.25,
            blocks_per_stage: 1,
            seed: 0,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 8,
            ..TrainConfig::default()
        },
        adapt: AdaptConfig {
            steps: 200,
            learning_rate: 0.1,
            patience: 20,
            ..AdaptConfig::default()
        },
        shots: 25,
        eval: EvalOptions::default(),
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("reference-benchmark");
        let spec = BenchmarkData {
            resolution: 16,
            image_size: 32,
            shapes_per_class: 40,
            views: 2,
            split_ratio: 0.8,
            seed: 0,
        };
        let (_, data) = spec.build(&dir).unwrap();
        let exp = benchmark_experiment();
        let wallace = Method::Prior(PriorKind::WallaceAvg);
        let cgce = Method::Prior(PriorKind::Cgce);
        let hybrid = Method::Prior(PriorKind::Hybrid);
        let mut outcomes = Vec::new();
        let mut ordering_time = Duration::ZERO;
        for seed in 0..SEEDS {
            let t = Instant::now();
            let result = run_seed(&exp, &data, &[wallace, cgce, hybrid], seed, |_| {}).unwrap();
            ordering_time += t.elapsed();

            let run = MethodRun::run(Method::Prior(PriorKind::Gce), &exp, &data, seed).unwrap();
            let correct = evaluate(&run.model, &data, None, "gce", exp.shots, exp.eval).unwrap();
            let random = gce_rand(&run.model, &data, None, seed, exp.eval).unwrap();
            let outcome = SeedOutcome {
                wallace: result.gain(wallace).unwrap(),
                cgce: result.gain(cgce).unwrap(),
                hybrid: result.gain(hybrid).unwrap(),
                zs_novel: result.zs.iter().map(|r| (r.class.clone(), r.mean_iou)).collect(),
                gce_iou: mean(correct.iter().map(|r| r.mean_iou)),
                gce_rand_iou: mean(random.iter().map(|r| r.mean_iou)),
            };
            println!(
                "seed {seed}: relative gain wallace {:+.3} cgce {:+.3} hybrid {:+.3}; gce IoU {:.3}, random conditioning {:.3}",
                outcome.wallace, outcome.cgce, outcome.hybrid, outcome.gce_iou, outcome.gce_rand_iou
            );
            outcomes.push(outcome);
        }
        Benchmark { data, outcomes, ordering_time }
    })
}

#[test]
fn few_shot_ordering() {
    let b = benchmark();
    let wallace = mean(b.outcomes.iter().map(|o| o.wallace));
    let cgce = mean(b.outcomes.iter().map(|o| o.cgce));
    let hybrid = mean(b.outcomes.iter().map(|o| o.hybrid));
    let minutes = secs(b.ordering_time) / 60.0;
    let cgce_over_wallace = cgce - wallace >= 0.05;
    let wallace_nonnegative = wallace >= 0.0;
    let hybrid_over_cgce = hybrid >= cgce;
    verdict(
        "few-shot ordering",
        cgce_over_wallace && wallace_nonnegative && hybrid_over_cgce && minutes < 60.0,
        format!(
            "mean relative gain cgce {cgce:+.3}, wallace {wallace:+.3}, hybrid {hybrid:+.3}; \
             cgce-wallace >= 0.05: {cgce_over_wallace}, wallace >= 0: {wallace_nonnegative}, \
             hybrid >= cgce: {hybrid_over_cgce}; {minutes:.1} min"
        ),
    );
}

#[test]
fn random_conditioning_hurts() {
    let b = benchmark();
    let drop = mean(b.outcomes.iter().map(|o| 1.0 - o.gce_rand_iou / o.gce_iou));
    verdict(
        "random class conditioning",
        drop >= 0.2,
        format!("mean relative IoU drop {drop:.3} over {SEEDS} seeds"),
    );
}

#[test]
fn retrieval_trend_and_zero_shot_comparison() {
    let b = benchmark();
    let data = &b.data;
    let grids = |c: &str, split: Split| -> Vec<VoxelGrid> {
        data.shapes_of(c, split)
            .iter()
            .map(|&i| data.shapes[i].clone())
            .collect()
    };
    let base: Vec<VoxelGrid> = data
        .classes(ClassRole::Base)
        .iter()
        .flat_map(|c| grids(c, Split::Train))
        .collect();
    let ks = [
        OnnK::Count(1),
        OnnK::Count(2),
        OnnK::Count(5),
        OnnK::Count(10),
        OnnK::Full,
    ];
    let mut curve = vec![0.0; ks.len()];
    let mut near = Vec::new();
    let novel = data.classes(ClassRole::Novel);
    for c in &novel {
        let queries = grids(c, Split::Test);
        let refs: Vec<&VoxelGrid> = queries.iter().collect();
        let db = grids(c, Split::Train);
        let mut onn1 = 0.0;
        for (slot, &k) in curve.iter_mut().zip(&ks) {
            let s = mean(onn_scores(&refs, &db, k, 100, 0).unwrap());
            *slot += s / novel.len() as f64;
            if k == OnnK::Count(1) {
                onn1 = s;
            }
        }
        let proximity = proximity_class(&queries, &base).unwrap();
        if proximity > 0.5 {
            let zs = mean(
                b.outcomes
                    .iter()
                    .map(|o| o.zs_novel.iter().find(|(n, _)| n == c).unwrap().1),
            );
            near.push((c.clone(), proximity, onn1, zs));
        }
    }
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
    let zs_wins = !near.is_empty() && near.iter().all(|(_, _, onn1, zs)| onn1 < zs);
    let curve_text: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
    let near_text: Vec<String> = near
        .iter()
        .map(|(c, p, o, z)| format!("{c} (proximity {p:.2}): ONN-1 {o:.3} vs ZS {z:.3}"))
        .collect();
    verdict(
        "retrieval trend",
        monotone && zs_wins,
        format!(
            "ONN-K for K = 1, 2, 5, 10, full: [{}], monotone: {monotone}; {}",
            curve_text.join(", "),
            if near_text.is_empty() {
                "no novel class above proximity 0.5".into()
            } else {
                near_text.join("; ")
            }
        ),
    );
}

#[test]
fn proximity_reflects_distance_from_the_base_family() {
    let r = 32;
    let spec = SynthClassSpec::new("cyl", Family::Cylinder, ClassRole::Base, r, 1);
    let base = generate_class(&spec, 20, 5, r).unwrap();
    let copied = proximity_class(&base, &base).unwrap();
    let sweep: Vec<f64> = [-1.0, -2.0, -3.0]
        .iter()
        .map(|&delta| {
            let morphed = spec.clone().shifted("radius", delta);
            proximity_class(&generate_class(&morphed, 20, 5, r).unwrap(), &base).unwrap()
        })
        .collect();
    let strictly_decreasing = copied > sweep[0] && sweep.windows(2).all(|w| w[1] < w[0]);
    verdict(
        "proximity",
        copied == 1.0 && strictly_decreasing,
        format!("copy {copied}, radius -1/-2/-3 voxels: {sweep:.3?}"),
    );
}
