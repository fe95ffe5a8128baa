//! Small stateless and dense layers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

use super::tensor::{join, Module, Param, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w = (0..in_features * out_features)
            .map(|_| T::of(dist.sample(rng)))
            .collect();
        let b = (0..out_features).map(|_| T::of(dist.sample(rng))).collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(Tensor::from_vec(&[out_features, in_features], w).expect("shape")),
            bias: Param::new(Tensor::from_vec(&[out_features], b).expect("shape")),
        }
    }

    /// `[N, in] → [N, out]`; the input itself serves as the cache.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Dimension(format!(
                "linear expects [N, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            self.in_features as isize,
            1,
            self.weight.value.data(),
            1,
            self.in_features as isize,
            T::one(),
            y.data_mut(),
            self.out_features as isize,
            1,
        );
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let n = x.batch();
        if param_grads {
            // dW[o, i] += Σ_n dy[n, o] · x[n, i]
            T::gemm(
                self.out_features,
                n,
                self.in_features,
                T::one(),
                dy.data(),
                1,
                self.out_features as isize,
                x.data(),
                self.in_features as isize,
                1,
                T::one(),
                self.weight.grad.data_mut(),
                self.in_features as isize,
                1,
            );
            for s in 0..n {
                for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(dy.item(s)) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            self.out_features as isize,
            1,
            self.weight.value.data(),
            self.in_features as isize,
            1,
            T::zero(),
            dx.data_mut(),
            self.in_features as isize,
            1,
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Mean over all spatial positions: `[N, C, ...] → [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.item_len() / c;
    let inv = T::one() / T::of(s as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let xi = x.item(i);
        for ch in 0..c {
            y.item_mut(i)[ch] = xi[ch * s..(ch + 1) * s].iter().copied().sum::<T>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let c = input_shape[1];
    let s = dx.item_len() / c;
    let inv = T::one() / T::of(s as f64);
    for i in 0..input_shape[0] {
        let d = dy.item(i).to_vec();
        for (ch, row) in dx.item_mut(i).chunks_mut(s).enumerate() {
            row.fill(d[ch] * inv);
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling of `[N, C, D, H, W]` volumes.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut y = Tensor::zeros(&[n, c, 2 * d, 2 * h, 2 * w]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for nc in 0..n * c {
        let src = &x.data()[nc * d * h * w..(nc + 1) * d * h * w];
        let dst = &mut y.data_mut()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        for z in 0..od {
            for yy in 0..oh {
                let srow = &src[((z / 2) * h + yy / 2) * w..];
                let drow = &mut dst[(z * oh + yy) * ow..(z * oh + yy + 1) * ow];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let (n, c, od, oh, ow) = (s[0], s[1], s[2], s[3], s[4]);
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, d, h, w]);
    for nc in 0..n * c {
        let src = &dy.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut dx.data_mut()[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for yy in 0..oh {
                let srow = &src[(z * oh + yy) * ow..(z * oh + yy + 1) * ow];
                let base = ((z / 2) * h + yy / 2) * w;
                for (xx, &v) in srow.iter().enumerate() {
                    dst[base + xx / 2] += v;
                }
            }
        }
    }
    dx
}
