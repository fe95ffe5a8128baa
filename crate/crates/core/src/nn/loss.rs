//! Voxelwise binary cross-entropy.

use crate::error::{Error, Result};
use crate::voxel::{OccupancyField, VoxelGrid};

use super::layers::sigmoid;
use super::tensor::{Real, Tensor};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

fn check(field: &OccupancyField, target: &VoxelGrid) -> Result<()> {
    if field.resolution() != target.resolution() {
        return Err(Error::Dimension(format!(
            "prediction at {}³ vs target at {}³",
            field.resolution(),
            target.resolution()
        )));
    }
    Ok(())
}

/// `−(1/N) Σ [y log p + (1−y) log(1−p)]` with `p` clamped to `[ε, 1−ε]`.
pub fn bce_loss(field: &OccupancyField, target: &VoxelGrid) -> Result<f64> {
    check(field, target)?;
    let sum: f64 = field
        .probabilities()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = clamp(p);
            if target.get_index(i) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / field.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to the probabilities; zero where
/// the clamp is active.
pub fn bce_loss_grad(field: &OccupancyField, target: &VoxelGrid) -> Result<Vec<f64>> {
    check(field, target)?;
    let n = field.len() as f64;
    Ok(field
        .probabilities()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
                return 0.0;
            }
            if target.get_index(i) {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Mean BCE of `sigmoid(logits)` against a batch of targets, together with
/// the gradient with respect to the logits.
///
/// `logits` is `[N, 1, R, R, R]` in grid index order. The reported loss uses
/// the clamp; the gradient is the exact `(p − y)/(N·R³)` of the unclamped
/// sigmoid cross-entropy.
pub fn bce_with_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &[&VoxelGrid],
) -> Result<(f64, Tensor<T>)> {
    let n = logits.batch();
    if targets.len() != n {
        return Err(Error::Dimension(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let per = logits.item_len();
    for t in targets {
        if t.len() != per {
            return Err(Error::Dimension(format!(
                "target with {} voxels for predictions of {per}",
                t.len()
            )));
        }
    }
    let total = (n * per) as f64;
    let scale = T::of(1.0 / total);
    let mut grad = Tensor::zeros(logits.shape());
    let mut sum = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let g = grad.item_mut(i);
        for (j, &z) in logits.item(i).iter().enumerate() {
            let p = sigmoid(z);
            let y = t.get_index(j);
            let pc = clamp(p.as_f64());
            sum -= if y { pc.ln() } else { (1.0 - pc).ln() };
            g[j] = (if y { p - T::one() } else { p }) * scale;
        }
    }
    Ok((sum / total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let target =
            VoxelGrid::from_bools(2, &[true, false, true, true, false, false, true, false])
                .unwrap();
        let half = OccupancyField::filled(2, 0.5).unwrap();
        assert!((bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let single = VoxelGrid::full(1).unwrap();
        let f = OccupancyField::new(1, vec![0.25]).unwrap();
        assert!((bce_loss(&f, &single).unwrap() - 4f64.ln()).abs() < 1e-15);

        let exact = OccupancyField::from(&target);
        let l = bce_loss(&exact, &target).unwrap();
        assert!(l > 0.0 && l < 2.0 * BCE_EPSILON);
    }

    #[test]
    fn resolution_mismatch() {
        let f = OccupancyField::filled(2, 0.5).unwrap();
        assert!(matches!(
            bce_loss(&f, &VoxelGrid::empty(3).unwrap()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn logits_path_agrees_with_field_path() {
        let target =
            VoxelGrid::from_bools(2, &[true, false, true, true, false, false, true, false])
                .unwrap();
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 0.7 - 2.5).collect();
        let logits = Tensor::from_vec(&[1, 1, 2, 2, 2], z.clone()).unwrap();
        let (loss, grad) = bce_with_logits(&logits, &[&target]).unwrap();
        let field = OccupancyField::new(2, z.iter().map(|&v| sigmoid(v)).collect()).unwrap();
        assert!((loss - bce_loss(&field, &target).unwrap()).abs() < 1e-14);
        // chain rule through the sigmoid
        let dp = bce_loss_grad(&field, &target).unwrap();
        for (i, &p) in field.probabilities().iter().enumerate() {
            assert!((grad.data()[i] - dp[i] * p * (1.0 - p)).abs() < 1e-14);
        }
    }
}
