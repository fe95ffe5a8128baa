//! Volumetric occupancy decoder.
//!
//! The input vector is reshaped to a `[c₀, R/8, R/8, R/8]` volume and passed
//! through seven 3×3×3 convolutions, with nearest-neighbour ×2 upsampling
//! after layers 1, 3 and 5:
//!
//! ```text
//! R/8: L1 → up → R/4: L2, L3 → up → R/2: L4, L5 → up → R: L6, L7 → sigmoid
//! ```
//!
//! Layers 1–6 are followed by batch norm and ReLU; layer 7 maps to a single
//! channel of logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::OccupancyField;

use super::conv::{Conv, ConvCache, ConvGeometry};
use super::convbn::{Conditioning, ConvBn, ConvBnCache, Modulations};
use super::layers::{relu, relu_backward, sigmoid, upsample2, upsample2_backward};
use super::tensor::{join, Module, Param, Real, Tensor};

pub const DECODER_LAYERS: usize = 7;
const UPSAMPLE_AFTER: [bool; 6] = [true, false, true, false, true, false];
const FULL_WIDTHS: [usize; 6] = [128, 64, 64, 32, 32, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub output_resolution: usize,
    pub num_layers: usize,
    pub input_dim: usize,
    pub width_scale: f64,
    pub conditioning: Conditioning,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            output_resolution: 32,
            num_layers: DECODER_LAYERS,
            input_dim: 128,
            width_scale: 1.0,
            conditioning: Conditioning::None,
        }
    }
}

impl DecoderConfig {
    pub fn seed_extent(&self) -> usize {
        self.output_resolution / 8
    }

    pub fn seed_channels(&self) -> usize {
        self.input_dim / self.seed_extent().pow(3)
    }

    pub fn widths(&self) -> [usize; 6] {
        FULL_WIDTHS.map(|w| ((w as f64 * self.width_scale).round() as usize).max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers != DECODER_LAYERS {
            return Err(Error::Configuration(format!(
                "the decoder has exactly {DECODER_LAYERS} layers, got {}",
                self.num_layers
            )));
        }
        let r = self.output_resolution;
        if r < 8 || !r.is_multiple_of(8) {
            return Err(Error::Configuration(format!(
                "output resolution must be a positive multiple of 8, got {r}"
            )));
        }
        let cells = self.seed_extent().pow(3);
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(cells) {
            return Err(Error::Configuration(format!(
                "input_dim {} is not a multiple of the {cells}-cell seed volume",
                self.input_dim
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Configuration(format!(
                "decoder width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    config: DecoderConfig,
    layers: Vec<ConvBn<T>>,
    pub head: Conv<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    layers: Vec<ConvBnCache<T>>,
    /// Post-ReLU activations of layers 1–6 (before upsampling).
    acts: Vec<Tensor<T>>,
    head: ConvCache<T>,
    input_shape: Vec<usize>,
}

impl<T: Real> Decoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut cin = config.seed_channels();
        let mut layers = Vec::with_capacity(6);
        for (l, &w) in widths.iter().enumerate() {
            layers.push(ConvBn::new(
                format!("decoder/layer{}", l + 1),
                cin,
                w,
                ConvGeometry::cube(3, 1),
                config.conditioning,
                rng,
            ));
            cin = w;
        }
        let head = Conv::new(cin, 1, ConvGeometry::cube(3, 1), true, rng);
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .map(|l| (l.id.clone(), l.bn.channels()))
            .collect()
    }

    /// `[N, input_dim]` to `[N, 1, R, R, R]` logits in grid index order.
    pub fn forward(
        &self,
        z: &Tensor<T>,
        mods: &Modulations<T>,
        train: bool,
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "decoder expects [N, {}], got {:?}",
                self.config.input_dim,
                z.shape()
            )));
        }
        let n = z.batch();
        let e = self.config.seed_extent();
        let mut h = z
            .clone()
            .reshape(&[n, self.config.seed_channels(), e, e, e])?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        for (layer, &up) in self.layers.iter().zip(&UPSAMPLE_AFTER) {
            let (y, c) = layer.forward(&h, mods, train)?;
            caches.push(c);
            let a = relu(&y);
            h = if up { upsample2(&a) } else { a.clone() };
            acts.push(a);
        }
        let (logits, head) = self.head.forward(&h)?;
        Ok((
            logits,
            DecoderCache {
                layers: caches,
                acts,
                head,
                input_shape: z.shape().to_vec(),
            },
        ))
    }

    /// Returns the input gradient when `input_grad` and the modulation
    /// gradients of conditioned layers.
    pub fn backward(
        &mut self,
        cache: &DecoderCache<T>,
        dlogits: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Modulations<T>)> {
        let mut mg = Modulations::new();
        let mut dh = self
            .head
            .backward(&cache.head, dlogits, param_grads, true)?
            .expect("requested");
        let any_conditioned = self.config.conditioning.is_conditioned();
        for l in (0..self.layers.len()).rev() {
            if UPSAMPLE_AFTER[l] {
                dh = upsample2_backward(&dh);
            }
            let dy = relu_backward(&cache.acts[l], &dh);
            let need_dx = l > 0 || input_grad;
            // Below the last conditioned layer nothing is left to compute
            // unless parameter or input gradients are wanted.
            if !need_dx && !param_grads && !any_conditioned {
                return Ok((None, mg));
            }
            match self.layers[l].backward(&cache.layers[l], &dy, param_grads, need_dx, &mut mg)? {
                Some(d) => dh = d,
                None => return Ok((None, mg)),
            }
        }
        let dz = dh.reshape(&cache.input_shape)?;
        Ok((Some(dz), mg))
    }

    pub fn update_running(&mut self, cache: &DecoderCache<T>) {
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            l.update_running(c);
        }
    }
}

/// Sigmoid of one item of a logits batch as an occupancy field.
pub fn logits_to_field<T: Real>(
    logits: &Tensor<T>,
    item: usize,
    resolution: usize,
) -> Result<OccupancyField> {
    OccupancyField::new(
        resolution,
        logits
            .item(item)
            .iter()
            .map(|&v| sigmoid(v).as_f64())
            .collect(),
    )
}

impl<T: Real> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for l in &self.layers {
            l.visit(prefix, f);
        }
        self.head.visit(&join(prefix, "decoder/layer7/conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_mut(prefix, f);
        }
        self.head.visit_mut(&join(prefix, "decoder/layer7/conv"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for l in &self.layers {
            l.visit_buffers(prefix, f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for l in &mut self.layers {
            l.visit_buffers_mut(prefix, f);
        }
    }
}
