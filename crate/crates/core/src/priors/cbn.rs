//! Per-class, per-layer batch-norm affines.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Modulation, Modulations, Param, Real, Tensor};
use crate::seed::rng_for;

pub const CBN_INIT_MEAN: f64 = 1.0;
pub const CBN_INIT_STD: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct CbnRow<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Clone, Debug)]
pub struct CbnBank<T> {
    layers: Vec<(String, usize)>,
    rows: BTreeMap<String, Vec<CbnRow<T>>>,
}

impl<T: Real> CbnBank<T> {
    /// `layers` lists the conditioned normalisation layers as `(id, channels)`.
    pub fn new(layers: Vec<(String, usize)>) -> Self {
        Self {
            layers,
            rows: BTreeMap::new(),
        }
    }

    pub fn layers(&self) -> &[(String, usize)] {
        &self.layers
    }

    /// Adds (or re-draws) every row of `class` with `γ, β ~ N(1, 0.2)`.
    pub fn init_class(&mut self, class: &str, seed: u64) {
        let normal = Normal::new(CBN_INIT_MEAN, CBN_INIT_STD).expect("valid normal");
        let rows = self
            .layers
            .iter()
            .map(|(id, c)| {
                let mut rng = rng_for(seed, &["cbn", class, id]);
                let mut draw = || {
                    let v = (0..*c).map(|_| T::of(normal.sample(&mut rng))).collect();
                    Param::new(Tensor::from_vec(&[*c], v).expect("shape"))
                };
                let gamma = draw();
                let beta = draw();
                CbnRow { gamma, beta }
            })
            .collect();
        self.rows.insert(class.to_string(), rows);
    }

    pub fn contains(&self, class: &str) -> bool {
        self.rows.contains_key(class)
    }

    fn layer_index(&self, layer: &str) -> Option<usize> {
        self.layers.iter().position(|(id, _)| id == layer)
    }

    pub fn row(&self, class: &str, layer: &str) -> Result<&CbnRow<T>> {
        let l = self.layer_index(layer);
        self.rows
            .get(class)
            .zip(l)
            .map(|(r, l)| &r[l])
            .ok_or_else(|| Error::Lookup(format!("no CBN row for class {class}, layer {layer}")))
    }

    pub fn row_mut(&mut self, class: &str, layer: &str) -> Result<&mut CbnRow<T>> {
        let l = self.layer_index(layer);
        self.rows
            .get_mut(class)
            .zip(l)
            .map(|(r, l)| &mut r[l])
            .ok_or_else(|| Error::Lookup(format!("no CBN row for class {class}, layer {layer}")))
    }

    pub fn class_rows(&self) -> impl Iterator<Item = (&str, &[CbnRow<T>])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Visits `(class, layer, row)` triples.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &str, &mut CbnRow<T>)) {
        for (class, rows) in &mut self.rows {
            for ((id, _), row) in self.layers.iter().zip(rows) {
                f(class, id, row);
            }
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &str, &CbnRow<T>)) {
        for (class, rows) in &self.rows {
            for ((id, _), row) in self.layers.iter().zip(rows) {
                f(class, id, row);
            }
        }
    }

    /// Per-sample modulations of every layer for a batch of classes.
    pub fn modulations(&self, classes: &[&str]) -> Result<Modulations<T>> {
        let mut out = Modulations::new();
        for (id, c) in &self.layers {
            let mut m = Modulation::zeros(classes.len(), *c);
            for (i, class) in classes.iter().enumerate() {
                let row = self.row(class, id)?;
                m.gamma.item_mut(i).copy_from_slice(row.gamma.value.data());
                m.beta.item_mut(i).copy_from_slice(row.beta.value.data());
            }
            out.insert(id.clone(), m);
        }
        Ok(out)
    }

    /// Adds modulation gradients into the rows of the classes that produced them.
    pub fn accumulate(&mut self, classes: &[&str], grads: &Modulations<T>) -> Result<()> {
        for (id, _) in self.layers.clone() {
            let Some(g) = grads.get(&id) else { continue };
            for (i, class) in classes.iter().enumerate() {
                let row = self.row_mut(class, &id)?;
                row.gamma.grad.add_slice(g.gamma.item(i));
                row.beta.grad.add_slice(g.beta.item(i));
            }
        }
        Ok(())
    }
}

/// `(γ, β)` of `class` at `layer`.
pub fn mcce_params<'a, T: Real>(
    bank: &'a CbnBank<T>,
    class: &str,
    layer: &str,
) -> Result<(&'a [T], &'a [T])> {
    let row = bank.row(class, layer)?;
    Ok((row.gamma.value.data(), row.beta.value.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_init_and_are_isolated() {
        let mut bank = CbnBank::<f64>::new(vec![("l1".into(), 2000), ("l2".into(), 3)]);
        bank.init_class("a", 5);
        bank.init_class("b", 5);
        let (g, b) = mcce_params(&bank, "a", "l1").unwrap();
        for v in [g, b] {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!((mean - 1.0).abs() < 0.02 && (sd - 0.2).abs() < 0.02);
        }
        let before = bank.modulations(&["a"]).unwrap();
        bank.row_mut("b", "l2").unwrap().beta.value.data_mut()[0] = 9.0;
        assert_eq!(bank.modulations(&["a"]).unwrap(), before);
        assert!(matches!(
            mcce_params(&bank, "c", "l1"),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            mcce_params(&bank, "a", "l9"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn accumulate_routes_by_class() {
        let mut bank = CbnBank::<f64>::new(vec![("l".into(), 2)]);
        bank.init_class("a", 1);
        bank.init_class("b", 1);
        let mut grads = Modulations::new();
        let mut m = Modulation::zeros(3, 2);
        m.gamma
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        grads.insert("l".to_string(), m);
        bank.accumulate(&["a", "b", "a"], &grads).unwrap();
        assert_eq!(
            bank.row("a", "l").unwrap().gamma.grad.data(),
            &[101.0, 202.0]
        );
        assert_eq!(bank.row("b", "l").unwrap().gamma.grad.data(), &[10.0, 20.0]);
    }
}
