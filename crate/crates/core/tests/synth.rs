//! Synthetic shapes, renders and dataset files.

use shapeprior::model::ClassRole;
use shapeprior::synth::{
    build_dataset, generate_class, render, render_views, Camera, DatasetManifest, Family,
    ParamRange, RenderParams, Split, SynthClassSpec,
};
use shapeprior::voxel::VoxelGrid;

/// Every horizontal slice of a box stack is one filled rectangle, the
/// rectangles never grow going up, and there are at most `levels` distinct
/// ones.
fn is_box_stack(g: &VoxelGrid, max_levels: usize) -> bool {
    let r = g.resolution();
    let mut rects = Vec::new();
    for y in 0..r {
        let cells: Vec<(usize, usize)> = (0..r)
            .flat_map(|x| (0..r).map(move |z| (x, z)))
            .filter(|&(x, z)| g.get(x, y, z))
            .collect();
        if cells.is_empty() {
            continue;
        }
        let (x0, x1) = (
            cells.iter().map(|c| c.0).min().unwrap(),
            cells.iter().map(|c| c.0).max().unwrap(),
        );
        let (z0, z1) = (
            cells.iter().map(|c| c.1).min().unwrap(),
            cells.iter().map(|c| c.1).max().unwrap(),
        );
        if cells.len() != (x1 - x0 + 1) * (z1 - z0 + 1) {
            return false;
        }
        rects.push((x0, x1, z0, z1));
    }
    for w in rects.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.0 < a.0 || b.1 > a.1 || b.2 < a.2 || b.3 > a.3 {
            return false;
        }
    }
    rects.dedup();
    !rects.is_empty() && rects.len() <= max_levels
}

#[test]
fn box_stacks_decompose_into_nested_boxes() {
    let spec = SynthClassSpec::new("stack", Family::BoxStack, ClassRole::Base, 32, 0)
        .with_range("width", ParamRange::new(2.0, 6.0))
        .with_range("depth", ParamRange::new(2.0, 6.0))
        .with_range("shrink", ParamRange::new(0.0, 0.4));
    let shapes = generate_class(&spec, 40, 5, 32).unwrap();
    for g in &shapes {
        assert!(is_box_stack(g, 4));
    }
}

#[test]
fn generation_is_deterministic() {
    for f in Family::ALL {
        let spec = SynthClassSpec::new("c", f, ClassRole::Novel, 16, 0);
        assert_eq!(
            generate_class(&spec, 5, 11, 16).unwrap(),
            generate_class(&spec, 5, 11, 16).unwrap()
        );
        assert_ne!(
            generate_class(&spec, 5, 11, 16).unwrap(),
            generate_class(&spec, 5, 12, 16).unwrap()
        );
    }
}

#[test]
fn spread_controls_intra_class_variability() {
    use shapeprior::voxel::iou;
    let spread = |factor: f64| {
        let spec =
            SynthClassSpec::new("c", Family::TableLike, ClassRole::Base, 32, 0).with_spread(factor);
        let g = generate_class(&spec, 12, 3, 32).unwrap();
        let mut d = 0.0;
        let mut n = 0.0;
        for i in 0..g.len() {
            for j in 0..i {
                d += 1.0 - iou(&g[i], &g[j]).unwrap();
                n += 1.0;
            }
        }
        d / n
    };
    let (narrow, wide) = (spread(0.2), spread(1.0));
    assert!(spread(0.0) == 0.0 && narrow < wide, "{narrow} vs {wide}");
}

/// Point-in-convex-polygon test with a margin; `None` near the boundary.
fn inside_hull(hull: &[[f64; 2]], p: [f64; 2], margin: f64) -> Option<bool> {
    let mut min_d = f64::INFINITY;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len = (ex * ex + ey * ey).sqrt();
        // counter-clockwise hull: inside is to the left of every edge
        let d = (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / len;
        min_d = min_d.min(d);
    }
    if min_d.abs() < margin {
        None
    } else {
        Some(min_d > 0.0)
    }
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[test]
fn full_grid_silhouette_is_the_projected_cube() {
    let r = 8;
    let size = 64;
    let g = VoxelGrid::full(r).unwrap();
    for cam in [
        Camera {
            azimuth: 0.0,
            elevation: 0.0,
            depth_ratio: 1.0,
        },
        Camera {
            azimuth: 33.0,
            elevation: 27.0,
            depth_ratio: 0.8,
        },
        Camera {
            azimuth: 250.0,
            elevation: 25.0,
            depth_ratio: 0.65,
        },
    ] {
        let img = render(&g, &cam, size);
        let (right, up, _) = cam.basis();
        let h = cam.half_extent(r);
        let c = r as f64 / 2.0;
        // cube corners in normalised image coordinates (s right, t up)
        let mut corners = Vec::new();
        for i in 0..8 {
            let p = [
                (i & 1) as f64 * r as f64,
                ((i >> 1) & 1) as f64 * r as f64,
                ((i >> 2) & 1) as f64 * r as f64,
            ];
            let q = [p[0] - c, p[1] - c, p[2] - c];
            let s = (q[0] * right[0] + q[1] * right[1] + q[2] * right[2]) / h;
            let t = (q[0] * up[0] + q[1] * up[1] + q[2] * up[2]) / h;
            corners.push([s, t]);
        }
        let hull = convex_hull(corners);
        let mut checked = 0;
        for py in 0..size {
            for px in 0..size {
                let s = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let t = 1.0 - (py as f64 + 0.5) / size as f64 * 2.0;
                if let Some(inside) = inside_hull(&hull, [s, t], 1e-6) {
                    let hit = img.get(px, py, 0) < 1.0;
                    assert_eq!(hit, inside, "pixel ({px},{py}) camera {cam:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > size * size - 4 * size);
    }
}

#[test]
fn view_sampling_follows_ranges() {
    let g = generate_class(
        &SynthClassSpec::new("c", Family::Ring, ClassRole::Base, 16, 0),
        1,
        0,
        16,
    )
    .unwrap();
    let mut p = RenderParams {
        image_size: 16,
        ..RenderParams::default()
    };
    let views = render_views(&g[0], &p, 24, 3).unwrap();
    assert_eq!(views.len(), 24);
    for (cam, img) in &views {
        assert!((0.0..360.0).contains(&cam.azimuth));
        assert!((25.0..=30.0).contains(&cam.elevation));
        assert!((0.65..=1.0).contains(&cam.depth_ratio));
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    p.elevation_range = (25.0, 25.0);
    assert!(render_views(&g[0], &p, 5, 4)
        .unwrap()
        .iter()
        .all(|(c, _)| c.elevation == 25.0));
    assert_eq!(
        render_views(&g[0], &p, 5, 4).unwrap(),
        render_views(&g[0], &p, 5, 4).unwrap()
    );
    // rendering depends only on the grid and the camera
    let copy = g[0].clone();
    assert_eq!(
        render_views(&copy, &p, 3, 9).unwrap(),
        render_views(&g[0], &p, 3, 9).unwrap()
    );
    assert!(render_views(&g[0], &p, 0, 4).is_err());
}

fn small_specs(n_base: usize, n_novel: usize) -> Vec<SynthClassSpec> {
    (0..n_base + n_novel)
        .map(|i| {
            let role = if i < n_base {
                ClassRole::Base
            } else {
                ClassRole::Novel
            };
            SynthClassSpec::new(
                &format!("class{i:02}"),
                Family::ALL[i % 6],
                role,
                8,
                i as u64,
            )
        })
        .collect()
}

#[test]
fn dataset_counts_and_determinism() {
    let params = RenderParams {
        image_size: 8,
        ..RenderParams::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let specs = small_specs(1, 1);
    let m = build_dataset(&specs, 10, 4, 0.8, 7, &params, 8, a.path()).unwrap();
    // shape-level split: 8 train shapes and 2 test shapes per class, 4 views each
    assert_eq!(
        m.entries.iter().filter(|e| e.split == Split::Train).count(),
        64
    );
    assert_eq!(
        m.entries.iter().filter(|e| e.split == Split::Test).count(),
        16
    );
    for e in &m.entries {
        let same_shape: Vec<_> = m.entries.iter().filter(|o| o.shape == e.shape).collect();
        assert!(same_shape.iter().all(|o| o.split == e.split));
    }
    build_dataset(&specs, 10, 4, 0.8, 7, &params, 8, b.path()).unwrap();
    for f in [
        "manifest.jsonl",
        "manifest.jsonl.header.json",
        "images/class00/0003_02.png",
        "shapes/class01/0009.binvox",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let loaded = DatasetManifest::load(&a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded.entries, m.entries);
    assert_eq!(loaded.header, m.header);

    let mut dup = specs.clone();
    dup[1].class_id = dup[0].class_id.clone();
    assert!(matches!(
        build_dataset(&dup, 2, 1, 0.5, 7, &params, 8, b.path()),
        Err(shapeprior::Error::Configuration(_))
    ));
}

#[test]
fn seven_base_and_fourteen_novel_classes() {
    let params = RenderParams {
        image_size: 4,
        ..RenderParams::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_specs(7, 14), 2, 1, 0.5, 1, &params, 8, dir.path()).unwrap();
    assert_eq!(m.header.classes.len(), 21);
    assert_eq!(m.classes(ClassRole::Base).len(), 7);
    assert_eq!(m.classes(ClassRole::Novel).len(), 14);
}

#[test]
fn missing_files_fail_to_load() {
    let params = RenderParams {
        image_size: 4,
        ..RenderParams::default()
    };
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_specs(1, 0), 2, 1, 0.5, 1, &params, 8, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("shapes/class00/0001.binvox")).unwrap();
    assert!(matches!(
        DatasetManifest::load(&dir.path().join("manifest.jsonl")),
        Err(shapeprior::Error::Io { .. })
    ));
}
