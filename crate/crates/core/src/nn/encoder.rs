//! Residual image encoder.
//!
//! A 3×3 stride-2 stem, four stages of basic residual blocks with channel
//! widths `b·[1, 2, 4, 8]` (stages 2–4 halve the resolution), global average
//! pooling and a linear projection to the embedding. `b = round(64·width_scale)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::ConvGeometry;
use super::convbn::{Conditioning, ConvBn, ConvBnCache, Modulations};
use super::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Linear};
use super::tensor::{join, Module, Param, Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub embedding_dim: usize,
    pub width_scale: f64,
    pub blocks_per_stage: usize,
    pub conditioning: Conditioning,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            embedding_dim: 128,
            width_scale: 1.0,
            blocks_per_stage: 2,
            conditioning: Conditioning::None,
        }
    }
}

impl EncoderConfig {
    pub fn base_width(&self) -> usize {
        ((64.0 * self.width_scale).round() as usize).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.input_size < 2 || self.embedding_dim == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Configuration(format!(
                "invalid encoder config {self:?}"
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Configuration(format!(
                "encoder width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    a: ConvBn<T>,
    b: ConvBn<T>,
    down: Option<ConvBn<T>>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    a: ConvBnCache<T>,
    ra: Tensor<T>,
    b: ConvBnCache<T>,
    down: Option<ConvBnCache<T>>,
    out: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn new(
        id: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        cond: Conditioning,
        rng: &mut impl Rng,
    ) -> Self {
        let a = ConvBn::new(
            join(id, "a"),
            cin,
            cout,
            ConvGeometry::square(3, stride),
            cond,
            rng,
        );
        let b = ConvBn::new(
            join(id, "b"),
            cout,
            cout,
            ConvGeometry::square(3, 1),
            cond,
            rng,
        );
        let down = (stride != 1 || cin != cout).then(|| {
            ConvBn::new(
                join(id, "down"),
                cin,
                cout,
                ConvGeometry::square(1, stride),
                cond,
                rng,
            )
        });
        Self { a, b, down }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mods: &Modulations<T>,
        train: bool,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (ya, a) = self.a.forward(x, mods, train)?;
        let ra = relu(&ya);
        let (mut yb, b) = self.b.forward(&ra, mods, train)?;
        let down = match &self.down {
            Some(d) => {
                let (yd, c) = d.forward(x, mods, train)?;
                yb.add_assign(&yd);
                Some(c)
            }
            None => {
                yb.add_assign(x);
                None
            }
        };
        let out = relu(&yb);
        Ok((
            out.clone(),
            BlockCache {
                a,
                ra,
                b,
                down,
                out,
            },
        ))
    }

    fn backward(
        &mut self,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
        mg: &mut Modulations<T>,
    ) -> Result<Option<Tensor<T>>> {
        let dsum = relu_backward(&cache.out, dy);
        let dra = self
            .b
            .backward(&cache.b, &dsum, param_grads, true, mg)?
            .expect("requested");
        let dya = relu_backward(&cache.ra, &dra);
        let mut dx = self
            .a
            .backward(&cache.a, &dya, param_grads, input_grad, mg)?;
        let dshort = match (&mut self.down, &cache.down) {
            (Some(d), Some(c)) => d.backward(c, &dsum, param_grads, input_grad, mg)?,
            _ => input_grad.then(|| dsum.clone()),
        };
        if let (Some(dx), Some(ds)) = (dx.as_mut(), dshort) {
            dx.add_assign(&ds);
        }
        Ok(dx)
    }

    fn update_running(&mut self, cache: &BlockCache<T>) {
        self.a.update_running(&cache.a);
        self.b.update_running(&cache.b);
        if let (Some(d), Some(c)) = (&mut self.down, &cache.down) {
            d.update_running(c);
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        [&self.a, &self.b].into_iter().chain(self.down.as_ref())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        [&mut self.a, &mut self.b]
            .into_iter()
            .chain(self.down.as_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    stem: ConvBn<T>,
    blocks: Vec<Block<T>>,
    pub fc: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    stem: ConvBnCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    pooled: Tensor<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cond = config.conditioning;
        let base = config.base_width();
        let stem = ConvBn::new(
            "encoder/stem".into(),
            IMAGE_CHANNELS,
            base,
            ConvGeometry::square(3, 2),
            cond,
            rng,
        );
        let mut blocks = Vec::new();
        let mut cin = base;
        for stage in 0..4 {
            let cout = base << stage;
            for b in 0..config.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let id = format!("encoder/stage{}/block{}", stage + 1, b);
                blocks.push(Block::new(&id, cin, cout, stride, cond, rng));
                cin = cout;
            }
        }
        let fc = Linear::new(cin, config.embedding_dim, rng);
        Ok(Self {
            config,
            stem,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Normalisation layers in forward order as `(id, channels)`.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| b.layers()))
            .map(|l| (l.id.clone(), l.bn.channels()))
            .collect()
    }

    /// `[N, 3, S, S]` images to `[N, embedding_dim]`.
    pub fn forward(
        &self,
        images: &Tensor<T>,
        mods: &Modulations<T>,
        train: bool,
    ) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let s = self.config.input_size;
        if images.shape().len() != 4 || images.shape()[1..] != [IMAGE_CHANNELS, s, s] {
            return Err(Error::Dimension(format!(
                "encoder expects [N, {IMAGE_CHANNELS}, {s}, {s}] images, got {:?}",
                images.shape()
            )));
        }
        let n = images.batch();
        let x = images.clone().reshape(&[n, IMAGE_CHANNELS, 1, s, s])?;
        let (y, stem) = self.stem.forward(&x, mods, train)?;
        let mut h = relu(&y);
        let stem_out = h.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h, mods, train)?;
            caches.push(c);
            h = out;
        }
        let pooled = global_avg_pool(&h);
        let e = self.fc.forward(&pooled)?;
        Ok((
            e,
            EncoderCache {
                stem,
                stem_out,
                blocks: caches,
                pooled,
            },
        ))
    }

    /// Backpropagates an embedding gradient. Returns modulation gradients for
    /// conditioned layers; parameter gradients accumulate when `param_grads`.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<T>,
        de: &Tensor<T>,
        param_grads: bool,
    ) -> Result<Modulations<T>> {
        let mut mg = Modulations::new();
        let dpool = self.fc.backward(&cache.pooled, de, param_grads);
        let last_shape = cache
            .blocks
            .last()
            .map(|c| c.out.shape().to_vec())
            .unwrap_or_else(|| cache.stem_out.shape().to_vec());
        let mut dh = global_avg_pool_backward(&last_shape, &dpool);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = b
                .backward(c, &dh, param_grads, true, &mut mg)?
                .expect("requested");
        }
        let dy = relu_backward(&cache.stem_out, &dh);
        self.stem
            .backward(&cache.stem, &dy, param_grads, false, &mut mg)?;
        Ok(mg)
    }

    pub fn update_running(&mut self, cache: &EncoderCache<T>) {
        self.stem.update_running(&cache.stem);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.update_running(c);
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(prefix, f);
        for b in &self.blocks {
            for l in b.layers() {
                l.visit(prefix, f);
            }
        }
        self.fc.visit(&join(prefix, "encoder/fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(prefix, f);
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                l.visit_mut(prefix, f);
            }
        }
        self.fc.visit_mut(&join(prefix, "encoder/fc"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit_buffers(prefix, f);
        for b in &self.blocks {
            for l in b.layers() {
                l.visit_buffers(prefix, f);
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_buffers_mut(prefix, f);
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                l.visit_buffers_mut(prefix, f);
            }
        }
    }
}
