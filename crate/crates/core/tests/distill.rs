//! Distances, k-medoids and dataset distillation.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeprior::distill::{
    cached_distances, content_hash, distill, kept_counts, kmedoids, load_cache, pairwise_distances,
    performance_ratio, DistanceMatrix, MiniSpec,
};
use shapeprior::model::ClassRole;
use shapeprior::synth::{build_dataset, Family, RenderParams, Split, SynthClassSpec};
use shapeprior::voxel::VoxelGrid;
use shapeprior::Error;

fn block(r: usize, x0: usize) -> VoxelGrid {
    let mut g = VoxelGrid::empty(r).unwrap();
    for x in x0..x0 + 2 {
        for y in 0..2 {
            for z in 0..2 {
                g.set(x, y, z, true);
            }
        }
    }
    g
}

#[test]
fn distances_of_simple_pairs() {
    let d = pairwise_distances(&[block(4, 0), block(4, 1), block(4, 0), block(4, 2)]).unwrap();
    assert!((d.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(d.get(0, 2), 0.0);
    assert_eq!(d.get(0, 3), 1.0);
    for i in 0..4 {
        assert_eq!(d.get(i, i), 0.0);
        for j in 0..4 {
            assert_eq!(d.get(i, j), d.get(j, i));
        }
    }
    assert!(matches!(
        pairwise_distances(&[block(4, 0), block(5, 0)]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn three_point_hand_case() {
    // d(1,2)=0.1, d(1,3)=0.9, d(2,3)=0.8 in 1-based numbering
    let d =
        DistanceMatrix::from_full(3, vec![0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0]).unwrap();
    for seed in 0..20 {
        let m = kmedoids(&d, 1, seed).unwrap();
        assert_eq!(m.indices, vec![1]);
        assert!((m.objective - 0.9).abs() < 1e-12);
    }
}

#[test]
fn k_equals_n_and_k_too_large() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shapes: Vec<VoxelGrid> = (0..6)
        .map(|_| common::random_grid(4, 0.4, &mut rng))
        .collect();
    let d = pairwise_distances(&shapes).unwrap();
    let m = kmedoids(&d, 6, 3).unwrap();
    let mut idx = m.indices.clone();
    idx.sort_unstable();
    assert_eq!(idx, (0..6).collect::<Vec<_>>());
    assert_eq!(m.objective, 0.0);
    assert!(matches!(kmedoids(&d, 7, 3), Err(Error::Parameter(_))));
    assert!(matches!(kmedoids(&d, 0, 3), Err(Error::Parameter(_))));
}

/// Two base grids and noisy copies of each.
fn planted(rng: &mut ChaCha8Rng) -> (Vec<VoxelGrid>, Vec<usize>) {
    let r = 6;
    let n0 = rng.random_range(2..=6);
    let n1 = rng.random_range(2..=6);
    let bases = [
        common::random_grid(r, 0.3, rng),
        common::random_grid(r, 0.3, rng),
    ];
    let mut items: Vec<(VoxelGrid, usize)> = Vec::new();
    for (g, n) in [(0, n0), (1, n1)] {
        for _ in 0..n {
            let mut s = bases[g].clone();
            for i in 0..r * r * r {
                if rng.random_bool(0.03) {
                    s.set_index(i, !s.get_index(i));
                }
            }
            items.push((s, g));
        }
    }
    items.shuffle(rng);
    items.into_iter().unzip()
}

fn exhaustive_two(d: &DistanceMatrix) -> f64 {
    let n = d.n();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let v: f64 = (0..n).map(|i| d.get(i, a).min(d.get(i, b))).sum();
            best = best.min(v);
        }
    }
    best
}

#[test]
fn planted_clusters_match_exhaustive_optimum() {
    let mut matched = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (shapes, group) = planted(&mut rng);
        let d = pairwise_distances(&shapes).unwrap();
        let m = kmedoids(&d, 2, seed).unwrap();
        let opt = exhaustive_two(&d);
        assert!(
            m.objective <= 1.1 * opt + 1e-12,
            "seed {seed}: {} vs {opt}",
            m.objective
        );
        assert_ne!(group[m.indices[0]], group[m.indices[1]], "seed {seed}");
        if (m.objective - opt).abs() <= 1e-9 {
            matched += 1;
        }
    }
    assert!(matched >= 95, "{matched}/100");
}

fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> DistanceMatrix {
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v = rng.random_range(0.0..1.0);
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    DistanceMatrix::from_full(n, e).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmedoids_invariants(n in 1usize..30, k_frac in 0.0f64..1.0, seed in 0u64..1000, mseed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(mseed);
        let d = random_matrix(n, &mut rng);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let m = kmedoids(&d, k, seed).unwrap();
        prop_assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
        let mut idx = m.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(m.indices.iter().all(|&i| i < n));
        let mut recomputed = 0.0;
        for i in 0..n {
            let a = m.assignment[i];
            prop_assert!(m.indices.contains(&a));
            let nearest = m.indices.iter().map(|&c| d.get(i, c)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d.get(i, a), nearest);
            recomputed += d.get(i, a);
        }
        prop_assert_eq!(recomputed, m.objective);
        prop_assert_eq!(&m, &kmedoids(&d, k, seed).unwrap());
    }
}

#[test]
fn paper_category_counts() {
    // planes, cars, chairs, tables, displays, loudspeakers, phones
    let kept = kept_counts(&[4045, 7496, 6778, 8509, 832, 967, 392], 1250);
    assert_eq!(kept, vec![1250, 1250, 1250, 1250, 832, 967, 392]);
    assert_eq!(kept.iter().sum::<usize>() * 4, 28_764);
}

#[test]
fn ratio_of_identical_results_is_one() {
    let a: BTreeMap<String, f64> = [("a".to_string(), 0.3), ("b".to_string(), 0.7)].into();
    let r = performance_ratio(&a, &a).unwrap();
    assert!(r.per_class.values().all(|&v| v == 1.0));
    assert_eq!(r.mean, 1.0);
    let zero: BTreeMap<String, f64> = [("a".to_string(), 0.0), ("b".to_string(), 0.7)].into();
    assert!(matches!(
        performance_ratio(&a, &zero),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn cache_round_trip_and_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes: Vec<VoxelGrid> = (0..7)
        .map(|_| common::random_grid(5, 0.5, &mut rng))
        .collect();
    let first = cached_distances(dir.path(), &shapes).unwrap();
    assert_eq!(first, pairwise_distances(&shapes).unwrap().rounded_f32());
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), 1);
    let (loaded, r, h) = load_cache(&files[0]).unwrap();
    assert_eq!((loaded, r, h), (first.clone(), 5, content_hash(&shapes)));
    assert_eq!(cached_distances(dir.path(), &shapes).unwrap(), first);
    let mut other = shapes.clone();
    other.swap(0, 1);
    assert_ne!(content_hash(&other), content_hash(&shapes));
    std::fs::write(&files[0], b"garbage").unwrap();
    assert!(matches!(load_cache(&files[0]), Err(Error::Format { .. })));
}

fn small_dataset(dir: &std::path::Path) -> shapeprior::synth::DatasetManifest {
    let specs = vec![
        SynthClassSpec::new("big", Family::TableLike, ClassRole::Base, 8, 0),
        SynthClassSpec::new("small", Family::Cylinder, ClassRole::Novel, 8, 1),
    ];
    let params = RenderParams {
        image_size: 4,
        ..RenderParams::default()
    };
    build_dataset(&specs, 10, 6, 0.8, 3, &params, 8, dir).unwrap()
}

#[test]
fn distilled_manifest_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let spec = MiniSpec {
        k: 3,
        views: 4,
        seed: 9,
    };
    let mini = distill(&m, &spec, None).unwrap();
    let train: Vec<_> = mini
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .collect();
    assert_eq!(train.len(), 2 * 3 * 4);
    for class in ["big", "small"] {
        let mut shapes: Vec<&str> = train
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.shape.as_str())
            .collect();
        shapes.dedup();
        assert_eq!(shapes.len(), 3);
    }
    // views are distinct per medoid
    for e in &train {
        assert_eq!(
            train
                .iter()
                .filter(|o| o.shape == e.shape && o.view == e.view)
                .count(),
            1
        );
    }
    let test_before: Vec<_> = m
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .collect();
    let test_after: Vec<_> = mini
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .collect();
    assert_eq!(test_before, test_after);
    assert_eq!(mini.header.provenance["distill"]["kept"]["big"], 3);

    let again = distill(&m, &spec, None).unwrap();
    assert_eq!(
        mini.entries_bytes().unwrap(),
        again.entries_bytes().unwrap()
    );
    assert_eq!(mini.header_bytes().unwrap(), again.header_bytes().unwrap());

    // entry order does not matter
    let mut shuffled = m.clone();
    shuffled.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let from_shuffled = distill(&shuffled, &spec, None).unwrap();
    assert_eq!(
        from_shuffled
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .collect::<Vec<_>>(),
        train
    );

    // with a cache the result is unchanged
    let cache = tempfile::tempdir().unwrap();
    let cached = distill(&m, &spec, Some(cache.path())).unwrap();
    assert_eq!(cached.entries, mini.entries);
}

#[test]
fn small_categories_are_kept_whole() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let mini = distill(
        &m,
        &MiniSpec {
            k: 1250,
            views: 24,
            seed: 0,
        },
        None,
    )
    .unwrap();
    assert_eq!(mini.entries.len(), m.entries.len());
    assert_eq!(mini.header.provenance["distill"]["kept"]["small"], 8);

    let mut empty = m.clone();
    empty
        .entries
        .retain(|e| !(e.class == "small" && e.split == Split::Train));
    assert!(matches!(
        distill(&empty, &MiniSpec::default(), None),
        Err(Error::Configuration(_))
    ));
}
