//! Convolution followed by (possibly conditioned) batch norm.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::conv::{Conv, ConvCache, ConvGeometry};
use super::norm::{BatchNorm, BnCache, BnLayerSpec, Modulation};
use super::tensor::{join, Module, Param, Real, Tensor};

/// Per-sample modulations keyed by normalisation layer id.
pub type Modulations<T> = BTreeMap<String, Modulation<T>>;

/// Whether the normalisation layers of a network carry their own affine or
/// take one from a class prior. CBN and CAB differ only in who produces the
/// modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    None,
    Cbn,
    Cab,
}

impl Conditioning {
    pub fn is_conditioned(self) -> bool {
        self != Conditioning::None
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    /// Layer id; modulations are looked up under this key.
    pub id: String,
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
pub struct ConvBnCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(
        id: String,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        conditioning: Conditioning,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv::new(in_channels, out_channels, geometry, false, rng);
        let spec = BnLayerSpec::new(out_channels);
        let bn = if conditioning.is_conditioned() {
            BatchNorm::conditioned(spec)
        } else {
            BatchNorm::plain(spec)
        };
        Self { id, conv, bn }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mods: &Modulations<T>,
        train: bool,
    ) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let modulation = if self.bn.is_conditioned() {
            Some(mods.get(&self.id).ok_or_else(|| {
                Error::Configuration(format!("no conditioning supplied for layer {}", self.id))
            })?)
        } else {
            None
        };
        let (h, conv) = self.conv.forward(x)?;
        let (y, bn) = self.bn.forward(&h, modulation, train)?;
        Ok((y, ConvBnCache { conv, bn }))
    }

    /// Modulation gradients of conditioned layers are inserted into `mod_grads`.
    pub fn backward(
        &mut self,
        cache: &ConvBnCache<T>,
        dy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
        mod_grads: &mut Modulations<T>,
    ) -> Result<Option<Tensor<T>>> {
        let (dh, dmod) = self.bn.backward(&cache.bn, dy, param_grads)?;
        if let Some(m) = dmod {
            mod_grads.insert(self.id.clone(), m);
        }
        self.conv
            .backward(&cache.conv, &dh, param_grads, input_grad)
    }

    pub fn update_running(&mut self, cache: &ConvBnCache<T>) {
        self.bn.update_running(&cache.bn);
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let base = join(prefix, &self.id);
        self.conv.visit(&join(&base, "conv"), f);
        self.bn.visit(&join(&base, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let base = join(prefix, &self.id);
        self.conv.visit_mut(&join(&base, "conv"), f);
        self.bn.visit_mut(&join(&base, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn
            .visit_buffers(&join(&join(prefix, &self.id), "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn
            .visit_buffers_mut(&join(&join(prefix, &self.id), "bn"), f);
    }
}
