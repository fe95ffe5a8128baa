//! Finite-difference checks of the full model for every prior variant.

mod common;

use common::*;
use shapeprior::model::{class_of_param, GradMode};
use shapeprior::priors::PriorKind;

const DIRECTIONS: usize = 50;
const TOLERANCE: f64 = 1e-4;

fn check_variant(variant: PriorKind, train: bool) {
    let (mut model, images, targets, classes) = tiny_setup(variant, 17);
    let all = |_: &str| true;
    grads_of(
        &mut model,
        &images,
        &classes,
        &targets,
        train,
        GradMode::ALL,
    );
    let g = gather_grad(&model, &all);
    let loss = |m: &shapeprior::model::Model<f64>| loss_of(m, &images, &classes, &targets, train);
    let err = directional_check(&mut model, &all, &g, &loss, DIRECTIONS, 5);
    assert!(
        err <= TOLERANCE,
        "{variant} (train={train}) all-parameter error {err:e}"
    );

    if !variant.is_conditioned() || variant == PriorKind::WallaceAvg {
        return;
    }
    let class_only = |n: &str| class_of_param(n).is_some();
    grads_of(
        &mut model,
        &images,
        &classes,
        &targets,
        train,
        GradMode::CLASS_ONLY,
    );
    let backbone = gather_grad(&model, &|n| class_of_param(n).is_none());
    assert!(
        backbone.iter().all(|&v| v == 0.0),
        "{variant}: frozen parameters received gradient"
    );
    let g = gather_grad(&model, &class_only);
    let err = directional_check(&mut model, &class_only, &g, &loss, DIRECTIONS, 6);
    assert!(
        err <= TOLERANCE,
        "{variant} (train={train}) class-parameter error {err:e}"
    );
}

#[test]
fn every_variant_in_train_mode() {
    for v in PriorKind::ALL {
        check_variant(v, true);
    }
}

#[test]
fn every_variant_in_eval_mode() {
    for v in PriorKind::ALL {
        check_variant(v, false);
    }
}
