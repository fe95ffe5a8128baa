//! Compositional attention blocks: batch-norm modulation from codebooks.
//!
//! Each conditioned layer with `C` channels owns a codebook set of dimension
//! `2C` and a per-class attention table. The attended code sum is split into
//! `γ` (first `C` entries) and `β` (last `C` entries).

use crate::error::{Error, Result};
use crate::nn::{Modulation, Modulations, Real};
use crate::seed::rng_for;

use super::codebook::{compose_cgce, compose_cgce_backward, AttentionTable, CodebookSet};

#[derive(Clone, Debug)]
pub struct CabLayer<T> {
    pub id: String,
    pub channels: usize,
    pub codes: CodebookSet<T>,
    pub attention: AttentionTable<T>,
}

#[derive(Clone, Debug)]
pub struct CabBank<T> {
    pub layers: Vec<CabLayer<T>>,
}

impl<T: Real> CabBank<T> {
    pub fn new(
        layers: Vec<(String, usize)>,
        books: usize,
        codes_per_book: usize,
        seed: u64,
    ) -> Self {
        let layers = layers
            .into_iter()
            .map(|(id, channels)| {
                let mut rng = rng_for(seed, &["cab", &id, "codes"]);
                CabLayer {
                    codes: CodebookSet::new(books, codes_per_book, 2 * channels, &mut rng),
                    attention: AttentionTable::new(books, codes_per_book),
                    id,
                    channels,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn init_class(&mut self, class: &str, seed: u64) {
        for l in &mut self.layers {
            l.attention
                .init_class(class, seed, &format!("cab/{}", l.id));
        }
    }

    pub fn contains(&self, class: &str) -> bool {
        self.layers.iter().all(|l| l.attention.contains(class))
    }

    pub fn layer(&self, layer: &str) -> Result<&CabLayer<T>> {
        self.layers.iter().find(|l| l.id == layer).ok_or_else(|| {
            Error::Configuration(format!("layer {layer} is not attention-conditioned"))
        })
    }

    pub fn layer_mut(&mut self, layer: &str) -> Result<&mut CabLayer<T>> {
        self.layers
            .iter_mut()
            .find(|l| l.id == layer)
            .ok_or_else(|| {
                Error::Configuration(format!("layer {layer} is not attention-conditioned"))
            })
    }

    pub fn modulations(&self, classes: &[&str]) -> Result<Modulations<T>> {
        let mut out = Modulations::new();
        for l in &self.layers {
            let mut m = Modulation::zeros(classes.len(), l.channels);
            let mut cache: Vec<(&str, Vec<T>)> = Vec::new();
            for (i, class) in classes.iter().enumerate() {
                let v = match cache.iter().find(|(c, _)| c == class) {
                    Some((_, v)) => v.clone(),
                    None => {
                        let v = compose_cgce(&l.codes, &l.attention, class)?;
                        cache.push((class, v.clone()));
                        v
                    }
                };
                m.gamma.item_mut(i).copy_from_slice(&v[..l.channels]);
                m.beta.item_mut(i).copy_from_slice(&v[l.channels..]);
            }
            out.insert(l.id.clone(), m);
        }
        Ok(out)
    }

    /// Pulls modulation gradients back to attention logits (and codes when
    /// `codes_grad`).
    pub fn accumulate(
        &mut self,
        classes: &[&str],
        grads: &Modulations<T>,
        codes_grad: bool,
    ) -> Result<()> {
        for l in &mut self.layers {
            let Some(g) = grads.get(&l.id) else { continue };
            let mut distinct: Vec<&str> = classes.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            for class in distinct {
                let mut dv = vec![T::zero(); 2 * l.channels];
                for (i, c) in classes.iter().enumerate() {
                    if *c != class {
                        continue;
                    }
                    for (d, &x) in dv[..l.channels].iter_mut().zip(g.gamma.item(i)) {
                        *d += x;
                    }
                    for (d, &x) in dv[l.channels..].iter_mut().zip(g.beta.item(i)) {
                        *d += x;
                    }
                }
                compose_cgce_backward(&mut l.codes, &mut l.attention, class, &dv, codes_grad)?;
            }
        }
        Ok(())
    }
}

/// `(γ, β)` produced for `class` at `layer`.
pub fn cab_modulation<T: Real>(
    bank: &CabBank<T>,
    class: &str,
    layer: &str,
) -> Result<(Vec<T>, Vec<T>)> {
    let l = bank.layer(layer)?;
    let mut v = compose_cgce(&l.codes, &l.attention, class)?;
    let beta = v.split_off(l.channels);
    Ok((v, beta))
}
