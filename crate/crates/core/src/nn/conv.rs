//! Volumetric convolution via im2col + GEMM.
//!
//! Inputs are `[N, C, D, H, W]`. Planar convolutions use `D = 1` with a
//! depth-1 kernel, so one implementation serves both the image encoder and
//! the voxel decoder.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

use super::tensor::{join, Module, Param, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// `k×k×k` kernel with "same" padding for odd `k`.
    pub fn cube(k: usize, stride: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [k / 2; 3],
        }
    }

    /// `k×k` planar kernel.
    pub fn square(k: usize, stride: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            padding: [0, k / 2, k / 2],
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::Dimension(format!(
                    "input extent {} too small for kernel {}",
                    input[a], self.kernel[a]
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    /// `[out, in·kd·kh·kw]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Real> Conv<T> {
    /// Fan-in scaled uniform initialisation `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * geometry.taps();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w: Vec<T> = (0..out_channels * fan_in)
            .map(|_| T::of(dist.sample(rng)))
            .collect();
        let weight = Param::new(Tensor::from_vec(&[out_channels, fan_in], w).expect("shape"));
        let bias = bias.then(|| {
            let b: Vec<T> = (0..out_channels).map(|_| T::of(dist.sample(rng))).collect();
            Param::new(Tensor::from_vec(&[out_channels], b).expect("shape"))
        });
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<([usize; 3], [usize; 3])> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects [N, {}, D, H, W], got {s:?}",
                self.in_channels
            )));
        }
        let dims = [s[2], s[3], s[4]];
        Ok((dims, self.geometry.output_dims(dims)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (dims, out) = self.check_input(x)?;
        let n = x.batch();
        let k = self.in_channels * self.geometry.taps();
        let p: usize = out.iter().product();
        let mut y = Tensor::zeros(&[n, self.out_channels, out[0], out[1], out[2]]);
        let mut cols = vec![T::zero(); k * p];
        for i in 0..n {
            im2col(
                x.item(i),
                self.in_channels,
                dims,
                out,
                &self.geometry,
                &mut cols,
            );
            let yi = y.item_mut(i);
            if let Some(b) = &self.bias {
                for (o, row) in yi.chunks_mut(p).enumerate() {
                    row.fill(b.value.data()[o]);
                }
            }
            let beta = if self.bias.is_some() {
                T::one()
            } else {
                T::zero()
            };
            // Computed as Yᵀ = colsᵀ·Wᵀ so the long spatial axis is the GEMM row axis.
            T::gemm(
                p,
                k,
                self.out_channels,
                T::one(),
                &cols,
                1,
                p as isize,
                self.weight.value.data(),
                1,
                k as isize,
                beta,
                yi,
                1,
                p as isize,
            );
        }
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Accumulates parameter gradients when `param_grads` is set and returns
    /// the input gradient when `input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = &cache.input;
        let (dims, out) = self.check_input(x)?;
        let n = x.batch();
        let k = self.in_channels * self.geometry.taps();
        let p: usize = out.iter().product();
        if dy.shape() != [n, self.out_channels, out[0], out[1], out[2]] {
            return Err(Error::Dimension(format!(
                "conv upstream gradient {:?}",
                dy.shape()
            )));
        }
        let mut cols = vec![T::zero(); k * p];
        let mut dcols = vec![T::zero(); k * p];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let dyi = dy.item(i);
            if param_grads {
                im2col(
                    x.item(i),
                    self.in_channels,
                    dims,
                    out,
                    &self.geometry,
                    &mut cols,
                );
                T::gemm(
                    self.out_channels,
                    p,
                    k,
                    T::one(),
                    dyi,
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    self.weight.grad.data_mut(),
                    k as isize,
                    1,
                );
                if let Some(b) = &mut self.bias {
                    for (o, row) in dyi.chunks(p).enumerate() {
                        b.grad.data_mut()[o] += row.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    k,
                    self.out_channels,
                    p,
                    T::one(),
                    self.weight.value.data(),
                    1,
                    k as isize,
                    dyi,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(
                    &dcols,
                    self.in_channels,
                    dims,
                    out,
                    &self.geometry,
                    dx.item_mut(i),
                );
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + e − pad` lies inside `[0, w)`.
fn valid_range(w: usize, out: usize, stride: usize, e: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(e).div_ceil(stride).min(out);
    let hi = if w + pad > e {
        (w + pad - e).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds receptive fields into a `[C·taps, P]` matrix; `col2im` is its adjoint.
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    dims: [usize; 3],
    out: [usize; 3],
    g: &ConvGeometry,
    cols: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let (lo, hi) = valid_range(w, ow, sx, e, g.padding[2]);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let z = (oz * g.stride[0] + a) as isize - g.padding[0] as isize;
                        for oy in 0..oh {
                            let y = (oy * g.stride[1] + b) as isize - g.padding[1] as isize;
                            let out_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if z < 0 || z as usize >= d || y < 0 || y as usize >= h || lo == hi {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let base = (z as usize * h + y as usize) * w;
                            out_row[..lo].fill(T::zero());
                            out_row[hi..].fill(T::zero());
                            let x0 = base + lo * sx + e - g.padding[2];
                            if sx == 1 {
                                out_row[lo..hi].copy_from_slice(&xc[x0..x0 + hi - lo]);
                            } else {
                                for (k, v) in out_row[lo..hi].iter_mut().enumerate() {
                                    *v = xc[x0 + k * sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    dims: [usize; 3],
    out: [usize; 3],
    g: &ConvGeometry,
    dx: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let sx = g.stride[2];
    let mut row = 0;
    for c in 0..channels {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let (lo, hi) = valid_range(w, ow, sx, e, g.padding[2]);
                    let src = &cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let z = (oz * g.stride[0] + a) as isize - g.padding[0] as isize;
                        for oy in 0..oh {
                            let y = (oy * g.stride[1] + b) as isize - g.padding[1] as isize;
                            if z < 0 || z as usize >= d || y < 0 || y as usize >= h || lo == hi {
                                continue;
                            }
                            let base = (z as usize * h + y as usize) * w;
                            let in_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let x0 = base + lo * sx + e - g.padding[2];
                            for (k, &v) in in_row[lo..hi].iter().enumerate() {
                                dxc[x0 + k * sx] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
