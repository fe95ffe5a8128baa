//! Global class embeddings: one free vector per class.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Param, Real, Tensor};
use crate::seed::rng_for;

#[derive(Clone, Debug)]
pub struct GlobalEmbeddingTable<T> {
    pub dim: usize,
    rows: BTreeMap<String, Param<T>>,
}

impl<T: Real> GlobalEmbeddingTable<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// Adds a base-class row drawn from `N(0, 1)`.
    pub fn init_base(&mut self, class: &str, seed: u64) {
        let mut rng = rng_for(seed, &["gce", class]);
        let v: Vec<T> = (0..self.dim)
            .map(|_| T::of(StandardNormal.sample(&mut rng)))
            .collect();
        self.insert(class, v);
    }

    /// Adds a novel-class row at the mean of the current `base` rows.
    pub fn init_novel(&mut self, class: &str, base: &[&str]) -> Result<()> {
        if base.is_empty() {
            return Err(Error::Parameter(
                "novel embedding needs at least one base class".into(),
            ));
        }
        let mut mean = vec![0.0f64; self.dim];
        for b in base {
            for (m, v) in mean.iter_mut().zip(self.compose(b)?) {
                *m += v.as_f64();
            }
        }
        let n = base.len() as f64;
        self.insert(class, mean.into_iter().map(|m| T::of(m / n)).collect());
        Ok(())
    }

    pub fn insert(&mut self, class: &str, values: Vec<T>) {
        let t = Tensor::from_vec(&[self.dim], values).expect("embedding length");
        self.rows.insert(class.to_string(), Param::new(t));
    }

    pub fn contains(&self, class: &str) -> bool {
        self.rows.contains_key(class)
    }

    /// `e_S` of `class`, verbatim.
    pub fn compose(&self, class: &str) -> Result<&[T]> {
        Ok(self.row(class)?.value.data())
    }

    pub fn row(&self, class: &str) -> Result<&Param<T>> {
        self.rows
            .get(class)
            .ok_or_else(|| Error::Lookup(format!("no class embedding for {class}")))
    }

    pub fn row_mut(&mut self, class: &str) -> Result<&mut Param<T>> {
        self.rows
            .get_mut(class)
            .ok_or_else(|| Error::Lookup(format!("no class embedding for {class}")))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.rows.iter_mut().map(|(k, v)| (k.as_str(), v))
    }
}

/// Table lookup, as a free function mirroring the other compositions.
pub fn compose_gce<'a, T: Real>(
    table: &'a GlobalEmbeddingTable<T>,
    class: &str,
) -> Result<&'a [T]> {
    table.compose(class)
}
