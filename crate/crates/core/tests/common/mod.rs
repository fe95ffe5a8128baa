#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeprior::model::{ForwardOptions, GradMode, Model, ModelConfig};
use shapeprior::nn::{bce_with_logits, Module, Tensor};
use shapeprior::priors::PriorKind;
use shapeprior::voxel::VoxelGrid;

/// Smallest configuration that still exercises every layer.
pub fn tiny_config(variant: PriorKind, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        resolution: 8,
        image_size: 8,
        embedding_dim: 16,
        encoder_width: 4.0 / 64.0,
        decoder_width: 2.0 / 128.0 * 4.0,
        blocks_per_stage: 1,
        codebooks: 2,
        codes_per_book: 3,
        seed,
    }
}

pub fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = n * 3 * size * size;
    Tensor::from_vec(
        &[n, 3, size, size],
        (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_grid(r: usize, p: f64, rng: &mut ChaCha8Rng) -> VoxelGrid {
    let v: Vec<bool> = (0..r * r * r).map(|_| rng.random_bool(p)).collect();
    VoxelGrid::from_bools(r, &v).unwrap()
}

/// Flattened values of the parameters selected by `keep`.
pub fn gather(model: &Model<f64>, keep: &dyn Fn(&str) -> bool) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |name, p| {
        if keep(name) {
            out.extend_from_slice(p.value.data());
        }
    });
    out
}

pub fn gather_grad(model: &Model<f64>, keep: &dyn Fn(&str) -> bool) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |name, p| {
        if keep(name) {
            out.extend_from_slice(p.grad.data());
        }
    });
    out
}

pub fn scatter(model: &mut Model<f64>, keep: &dyn Fn(&str) -> bool, values: &[f64]) {
    let mut pos = 0;
    model.visit_mut("", &mut |name, p| {
        if keep(name) {
            let n = p.len();
            p.value.data_mut().copy_from_slice(&values[pos..pos + n]);
            pos += n;
        }
    });
}

/// Central-difference check of `loss` along random directions in the
/// parameter subspace selected by `keep`. Directions have unit norm so the
/// step stays well inside the smooth region around ReLU kinks. A directional
/// derivative smaller than 1% of the gradient norm is compared on that scale,
/// since its central difference is dominated by rounding. Returns the worst relative error.
pub fn directional_check(
    model: &mut Model<f64>,
    keep: &dyn Fn(&str) -> bool,
    analytic: &[f64],
    loss: &dyn Fn(&Model<f64>) -> f64,
    directions: usize,
    seed: u64,
) -> f64 {
    let theta = gather(model, keep);
    assert_eq!(theta.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 3e-6;
    let scale = 1e-2 * analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut v: Vec<f64> = (0..theta.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = v.iter().map(|d| d * d).sum::<f64>().sqrt();
        v.iter_mut().for_each(|d| *d /= norm);
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - h * d).collect();
        scatter(model, keep, &plus);
        let lp = loss(model);
        scatter(model, keep, &minus);
        let lm = loss(model);
        let fd = (lp - lm) / (2.0 * h);
        let an: f64 = analytic.iter().zip(&v).map(|(g, d)| g * d).sum();
        let denom = fd.abs().max(an.abs()).max(scale).max(1e-12);
        worst = worst.max((fd - an).abs() / denom);
    }
    scatter(model, keep, &theta);
    worst
}

/// Builds a tiny model for `variant`, registers two base classes and one
/// novel class, and returns it with a batch of images and targets.
pub fn tiny_setup(
    variant: PriorKind,
    seed: u64,
) -> (Model<f64>, Tensor<f64>, Vec<VoxelGrid>, Vec<&'static str>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(variant, seed);
    let mut model = Model::<f64>::new(cfg, &["a", "b"]).unwrap();
    model.add_novel_class("n").unwrap();
    if variant == PriorKind::WallaceAvg {
        for c in ["a", "b", "n"] {
            let g = random_grid(8, 0.4, &mut rng);
            let f =
                shapeprior::priors::wallace_prior(&[&g, &random_grid(8, 0.3, &mut rng)]).unwrap();
            model.set_average_shape(c, &f).unwrap();
        }
    }
    let classes = vec!["a", "n", "b", "n"];
    let images = random_images(classes.len(), 8, &mut rng);
    let targets = (0..classes.len())
        .map(|_| random_grid(8, 0.3, &mut rng))
        .collect();
    warm_running_stats(&mut model, &images, &classes, 40);
    (model, images, targets, classes)
}

pub fn loss_of(
    model: &Model<f64>,
    images: &Tensor<f64>,
    classes: &[&str],
    targets: &[VoxelGrid],
    train: bool,
) -> f64 {
    let refs: Vec<&VoxelGrid> = targets.iter().collect();
    let opts = ForwardOptions {
        train,
        knockout: None,
    };
    let (logits, _) = model.forward(images, classes, opts).unwrap();
    bce_with_logits(&logits, &refs).unwrap().0
}

pub fn grads_of(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    classes: &[&str],
    targets: &[VoxelGrid],
    train: bool,
    mode: GradMode,
) {
    let refs: Vec<&VoxelGrid> = targets.iter().collect();
    model.zero_grad();
    let opts = ForwardOptions {
        train,
        knockout: None,
    };
    let (logits, cache) = model.forward(images, classes, opts).unwrap();
    let (_, dl) = bce_with_logits(&logits, &refs).unwrap();
    model.backward(&cache, &dl, mode).unwrap();
}

/// Moves the normalisation running statistics towards the batch statistics so
/// eval-mode activations have a realistic scale.
pub fn warm_running_stats(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    classes: &[&str],
    steps: usize,
) {
    let opts = ForwardOptions {
        train: true,
        knockout: None,
    };
    for _ in 0..steps {
        let (_, cache) = model.forward(images, classes, opts).unwrap();
        model.update_running(&cache);
    }
}
