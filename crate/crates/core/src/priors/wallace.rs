//! Average-shape prior: the voxelwise mean of a class's shapes, embedded by a
//! small volumetric encoder and added to the image embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvCache;
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};
use crate::nn::tensor::join;
use crate::nn::{Conv, ConvGeometry, Linear, Module, Param, Real, Tensor};
use crate::voxel::{OccupancyField, VoxelGrid};

/// Voxelwise mean occupancy of `shapes`, without thresholding.
pub fn wallace_prior(shapes: &[&VoxelGrid]) -> Result<OccupancyField> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Parameter("average shape of an empty list".into()))?;
    let r = first.resolution();
    let mut counts = vec![0u32; first.len()];
    for s in shapes {
        if s.resolution() != r {
            return Err(Error::Dimension(format!(
                "mixed resolutions {r} and {}",
                s.resolution()
            )));
        }
        for (c, v) in counts.iter_mut().zip(s.iter()) {
            *c += v as u32;
        }
    }
    let n = shapes.len() as f64;
    OccupancyField::new(r, counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Three stride-2 3×3×3 convolutions with ReLU, global average pooling and a
/// linear projection.
#[derive(Clone, Debug)]
pub struct ShapeEncoder<T> {
    pub resolution: usize,
    convs: Vec<Conv<T>>,
    pub fc: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ShapeEncoderCache<T> {
    convs: Vec<ConvCache<T>>,
    acts: Vec<Tensor<T>>,
    pooled: Tensor<T>,
}

impl<T: Real> ShapeEncoder<T> {
    pub fn new(resolution: usize, width: usize, embedding_dim: usize, rng: &mut impl Rng) -> Self {
        let w = width.max(1);
        let chans = [1, w, 2 * w, 4 * w];
        let convs = (0..3)
            .map(|i| Conv::new(chans[i], chans[i + 1], ConvGeometry::cube(3, 2), true, rng))
            .collect();
        Self {
            resolution,
            convs,
            fc: Linear::new(4 * w, embedding_dim, rng),
        }
    }

    /// Fields `[N, R³]` (grid index order) to embeddings `[N, D]`.
    pub fn forward(&self, fields: &Tensor<T>) -> Result<(Tensor<T>, ShapeEncoderCache<T>)> {
        let r = self.resolution;
        if fields.shape().len() != 2 || fields.shape()[1] != r * r * r {
            return Err(Error::Dimension(format!(
                "shape encoder expects [N, {}], got {:?}",
                r * r * r,
                fields.shape()
            )));
        }
        let mut h = fields.clone().reshape(&[fields.batch(), 1, r, r, r])?;
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for c in &self.convs {
            let (y, cache) = c.forward(&h)?;
            convs.push(cache);
            h = relu(&y);
            acts.push(h.clone());
        }
        let pooled = global_avg_pool(&h);
        let e = self.fc.forward(&pooled)?;
        Ok((
            e,
            ShapeEncoderCache {
                convs,
                acts,
                pooled,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ShapeEncoderCache<T>, de: &Tensor<T>) -> Result<()> {
        let dp = self.fc.backward(&cache.pooled, de, true);
        let mut dh =
            global_avg_pool_backward(cache.acts.last().expect("three layers").shape(), &dp);
        for i in (0..self.convs.len()).rev() {
            let dy = relu_backward(&cache.acts[i], &dh);
            match self.convs[i].backward(&cache.convs[i], &dy, true, i > 0)? {
                Some(d) => dh = d,
                None => break,
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for ShapeEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// `E_S(S^p)` for a single prior field.
pub fn wallace_encode<T: Real>(
    prior: &OccupancyField,
    encoder: &ShapeEncoder<T>,
) -> Result<Vec<T>> {
    let x = Tensor::from_vec(
        &[1, prior.len()],
        prior.probabilities().iter().map(|&p| T::of(p)).collect(),
    )?;
    Ok(encoder.forward(&x)?.0.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging_cases() {
        let mut a = VoxelGrid::empty(4).unwrap();
        let mut b = VoxelGrid::empty(4).unwrap();
        a.set(0, 0, 0, true);
        a.set(1, 0, 0, true);
        b.set(3, 3, 3, true);
        b.set(2, 3, 3, true);
        let single = wallace_prior(&[&a]).unwrap();
        assert_eq!(single, OccupancyField::from(&a));
        let same = wallace_prior(&[&a, &a, &a]).unwrap();
        assert_eq!(same, OccupancyField::from(&a));
        let mix = wallace_prior(&[&a, &b]).unwrap();
        assert!(mix.probabilities().iter().all(|&p| p == 0.0 || p == 0.5));
        assert_eq!(mix.probabilities().iter().filter(|&&p| p == 0.5).count(), 4);
        assert!(matches!(wallace_prior(&[]), Err(Error::Parameter(_))));
    }
}
