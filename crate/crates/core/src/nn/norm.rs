//! Batch normalisation with either learned or externally supplied affines.
//!
//! A layer built with [`BatchNorm::plain`] owns its `γ, β`. A layer built with
//! [`BatchNorm::conditioned`] has no affine of its own and expects a
//! per-sample [`Modulation`] at every call; that is how class-conditional
//! batch norm and attention-block modulation plug in.

use crate::error::{Error, Result};

use super::tensor::{join, Module, Param, Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnLayerSpec {
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BnLayerSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Per-sample affine parameters, both `[N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> Modulation<T> {
    /// Repeats one `(γ, β)` row for every sample of a batch.
    pub fn broadcast(gamma: &[T], beta: &[T], batch: usize) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Dimension("gamma and beta lengths differ".into()));
        }
        let c = gamma.len();
        let mut g = Vec::with_capacity(batch * c);
        let mut b = Vec::with_capacity(batch * c);
        for _ in 0..batch {
            g.extend_from_slice(gamma);
            b.extend_from_slice(beta);
        }
        Ok(Self {
            gamma: Tensor::from_vec(&[batch, c], g)?,
            beta: Tensor::from_vec(&[batch, c], b)?,
        })
    }

    pub fn zeros(batch: usize, channels: usize) -> Self {
        Self {
            gamma: Tensor::zeros(&[batch, channels]),
            beta: Tensor::zeros(&[batch, channels]),
        }
    }
}

/// Per-channel statistics, either of the current batch or running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// Biased mean/variance over batch and spatial axes of `[N, C, ...]`.
    pub fn of(x: &Tensor<T>) -> Self {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s = x.item_len() / c;
        let m = T::of((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                acc += x.item(i)[ch * s..(ch + 1) * s].iter().copied().sum::<T>();
            }
            let mu = acc / m;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &x.item(i)[ch * s..(ch + 1) * s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        Self { mean, var }
    }
}

/// `y = γ ⊙ (x − μ)/√(σ² + ε) + β` with one `(γ, β)` row shared by the batch.
pub fn cond_batchnorm<T: Real>(
    x: &Tensor<T>,
    stats: &BatchStats<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: f64,
) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c {
        return Err(Error::Dimension(format!(
            "{c} channels but gamma {}, beta {}, stats {}",
            gamma.len(),
            beta.len(),
            stats.mean.len()
        )));
    }
    let s = x.item_len() / c;
    let mut y = x.clone();
    for i in 0..x.batch() {
        for (ch, row) in y.item_mut(i).chunks_mut(s).enumerate() {
            let inv = T::one() / (stats.var[ch] + T::of(epsilon)).sqrt();
            for v in row {
                *v = gamma[ch] * (*v - stats.mean[ch]) * inv + beta[ch];
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Affine<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub spec: BnLayerSpec,
    pub affine: Option<Affine<T>>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Tensor<T>,
    train: bool,
    batch_stats: Option<(BatchStats<T>, usize)>,
    modulated: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn plain(spec: BnLayerSpec) -> Self {
        let c = spec.channels;
        Self {
            spec,
            affine: Some(Affine {
                gamma: Param::new(Tensor::filled(&[c], T::one())),
                beta: Param::new(Tensor::zeros(&[c])),
            }),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], T::one()),
        }
    }

    pub fn conditioned(spec: BnLayerSpec) -> Self {
        Self {
            affine: None,
            ..Self::plain(spec)
        }
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn is_conditioned(&self) -> bool {
        self.affine.is_none()
    }

    /// Training mode normalises with batch statistics, eval mode with the
    /// running averages. Running averages are only updated by
    /// [`BatchNorm::update_running`].
    pub fn forward(
        &self,
        x: &Tensor<T>,
        modulation: Option<&Modulation<T>>,
        train: bool,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let c = self.spec.channels;
        if x.shape().len() < 2 || x.shape()[1] != c {
            return Err(Error::Dimension(format!(
                "batch norm over {c} channels got {:?}",
                x.shape()
            )));
        }
        let n = x.batch();
        let gamma_beta = match (&self.affine, modulation) {
            (Some(a), None) => Modulation::broadcast(a.gamma.value.data(), a.beta.value.data(), n)?,
            (None, Some(m)) => {
                if m.gamma.shape() != [n, c] || m.beta.shape() != [n, c] {
                    return Err(Error::Dimension(format!(
                        "modulation {:?} for batch {n} x {c} channels",
                        m.gamma.shape()
                    )));
                }
                m.clone()
            }
            (Some(_), Some(_)) => {
                return Err(Error::Configuration(
                    "modulation supplied to a batch norm with its own affine".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Configuration(
                    "conditioned batch norm called without modulation".into(),
                ))
            }
        };

        let (stats, batch_stats) = if train {
            let s = BatchStats::of(x);
            (s.clone(), Some((s, n * x.item_len() / c)))
        } else {
            (
                BatchStats {
                    mean: self.running_mean.data().to_vec(),
                    var: self.running_var.data().to_vec(),
                },
                None,
            )
        };
        let eps = T::of(self.spec.epsilon);
        let inv_std: Vec<T> = stats
            .var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let s = x.item_len() / c;
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            let g = gamma_beta.gamma.item(i);
            let b = gamma_beta.beta.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                for v in &mut xh[ch * s..(ch + 1) * s] {
                    *v = (*v - stats.mean[ch]) * inv_std[ch];
                }
            }
            let yi = y.item_mut(i);
            for ch in 0..c {
                for (o, &h) in yi[ch * s..(ch + 1) * s]
                    .iter_mut()
                    .zip(&xh[ch * s..(ch + 1) * s])
                {
                    *o = g[ch] * h + b[ch];
                }
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                gamma: gamma_beta.gamma,
                train,
                batch_stats,
                modulated: modulation.is_some(),
            },
        ))
    }

    /// Returns the input gradient and, for conditioned layers, the gradient
    /// with respect to the supplied modulation. Own-affine gradients are
    /// accumulated only when `param_grads` is set.
    pub fn backward(
        &mut self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Modulation<T>>)> {
        let c = self.spec.channels;
        let n = dy.batch();
        if dy.shape() != cache.xhat.shape() {
            return Err(Error::Dimension(format!(
                "batch norm upstream {:?}",
                dy.shape()
            )));
        }
        let s = dy.item_len() / c;
        let mut dmod = Modulation::zeros(n, c);
        let mut dxhat = dy.clone();
        for i in 0..n {
            let dyi = dy.item(i);
            let xh = cache.xhat.item(i);
            let g = cache.gamma.item(i);
            let dxi = dxhat.item_mut(i);
            for ch in 0..c {
                let r = ch * s..(ch + 1) * s;
                let mut dg = T::zero();
                let mut db = T::zero();
                for (&d, &h) in dyi[r.clone()].iter().zip(&xh[r.clone()]) {
                    dg += d * h;
                    db += d;
                }
                dmod.gamma.item_mut(i)[ch] = dg;
                dmod.beta.item_mut(i)[ch] = db;
                for v in &mut dxi[r] {
                    *v *= g[ch];
                }
            }
        }

        let mut dx = dxhat.clone();
        if cache.train {
            let m = T::of((n * s) as f64);
            for ch in 0..c {
                let mut sum_d = T::zero();
                let mut sum_dh = T::zero();
                for i in 0..n {
                    let r = ch * s..(ch + 1) * s;
                    for (&d, &h) in dxhat.item(i)[r.clone()].iter().zip(&cache.xhat.item(i)[r]) {
                        sum_d += d;
                        sum_dh += d * h;
                    }
                }
                let k = cache.inv_std[ch] / m;
                for i in 0..n {
                    let r = ch * s..(ch + 1) * s;
                    let xh = &cache.xhat.item(i)[r.clone()];
                    for (v, &h) in dx.item_mut(i)[r].iter_mut().zip(xh) {
                        *v = k * (m * *v - sum_d - h * sum_dh);
                    }
                }
            }
        } else {
            for i in 0..n {
                for (ch, row) in dx.item_mut(i).chunks_mut(s).enumerate() {
                    for v in row {
                        *v *= cache.inv_std[ch];
                    }
                }
            }
        }

        if cache.modulated {
            return Ok((dx, Some(dmod)));
        }
        if param_grads {
            if let Some(a) = &mut self.affine {
                for i in 0..n {
                    for ch in 0..c {
                        a.gamma.grad.data_mut()[ch] += dmod.gamma.item(i)[ch];
                        a.beta.grad.data_mut()[ch] += dmod.beta.item(i)[ch];
                    }
                }
            }
        }
        Ok((dx, None))
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let Some((stats, count)) = &cache.batch_stats else {
            return;
        };
        let mom = T::of(self.spec.momentum);
        let unbias = if *count > 1 {
            T::of(*count as f64 / (*count as f64 - 1.0))
        } else {
            T::one()
        };
        for ch in 0..self.spec.channels {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * stats.mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * stats.var[ch] * unbias;
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(a) = &self.affine {
            f(&join(prefix, "gamma"), &a.gamma);
            f(&join(prefix, "beta"), &a.beta);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(a) = &mut self.affine {
            f(&join(prefix, "gamma"), &mut a.gamma);
            f(&join(prefix, "beta"), &mut a.beta);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
