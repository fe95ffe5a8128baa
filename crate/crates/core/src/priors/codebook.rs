//! Shared codebooks with per-class sparsemax attention.
//!
//! A [`CodebookSet`] holds `M` codebooks of `m` codes of dimension `D`. Each
//! class owns raw attention logits `w ∈ ℝ^{M×m}`; its embedding is
//!
//! ```text
//! e = Σ_j Σ_k sparsemax(w_j)_k · c_{j,k}
//! ```

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::{sparsemax, sparsemax_backward, Param, Real, Tensor};
use crate::seed::rng_for;

/// Half-width of the uniform initialisation of codes and attention logits.
pub const CODEBOOK_INIT: f64 = 0.4;
pub const DEFAULT_CODEBOOKS: usize = 5;
pub const DEFAULT_CODES: usize = 6;

fn uniform<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-CODEBOOK_INIT, CODEBOOK_INIT).expect("valid bounds");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct CodebookSet<T> {
    pub books: usize,
    pub codes_per_book: usize,
    pub dim: usize,
    /// `[M, m, D]`
    pub codes: Param<T>,
}

impl<T: Real> CodebookSet<T> {
    pub fn new(books: usize, codes_per_book: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            books,
            codes_per_book,
            dim,
            codes: Param::new(uniform(&[books, codes_per_book, dim], rng)),
        }
    }

    pub fn code(&self, j: usize, k: usize) -> &[T] {
        let off = (j * self.codes_per_book + k) * self.dim;
        &self.codes.value.data()[off..off + self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionTable<T> {
    pub books: usize,
    pub codes_per_book: usize,
    rows: BTreeMap<String, Param<T>>,
}

impl<T: Real> AttentionTable<T> {
    pub fn new(books: usize, codes_per_book: usize) -> Self {
        Self {
            books,
            codes_per_book,
            rows: BTreeMap::new(),
        }
    }

    /// Adds (or re-draws) a class row from `U(−0.4, 0.4)`, seeded by
    /// `(seed, scope, class)`.
    pub fn init_class(&mut self, class: &str, seed: u64, scope: &str) {
        let mut rng = rng_for(seed, &[scope, "attention", class]);
        self.rows.insert(
            class.to_string(),
            Param::new(uniform(&[self.books, self.codes_per_book], &mut rng)),
        );
    }

    pub fn contains(&self, class: &str) -> bool {
        self.rows.contains_key(class)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn row(&self, class: &str) -> Result<&Param<T>> {
        self.rows
            .get(class)
            .ok_or_else(|| Error::Lookup(format!("no attention row for class {class}")))
    }

    pub fn row_mut(&mut self, class: &str) -> Result<&mut Param<T>> {
        self.rows
            .get_mut(class)
            .ok_or_else(|| Error::Lookup(format!("no attention row for class {class}")))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.rows.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Activated attention `sparsemax(w_j)` for every codebook `j`.
    pub fn activated(&self, class: &str) -> Result<Vec<Vec<T>>> {
        let w = self.row(class)?.value.data();
        w.chunks(self.codes_per_book).map(sparsemax).collect()
    }
}

fn check_dims<T: Real>(codes: &CodebookSet<T>, attn: &AttentionTable<T>) -> Result<()> {
    if codes.books != attn.books || codes.codes_per_book != attn.codes_per_book {
        return Err(Error::Dimension(format!(
            "codebooks {}×{} vs attention {}×{}",
            codes.books, codes.codes_per_book, attn.books, attn.codes_per_book
        )));
    }
    Ok(())
}

/// `Σ_k a_{j,k} c_{j,k}` for a single codebook `j` (0-based).
fn contribution<T: Real>(codes: &CodebookSet<T>, a: &[T], j: usize, out: &mut [T]) {
    for (k, &ak) in a.iter().enumerate() {
        if ak == T::zero() {
            continue;
        }
        for (o, &c) in out.iter_mut().zip(codes.code(j, k)) {
            *o += ak * c;
        }
    }
}

/// The attended sum of all codebooks for `class`.
pub fn compose_cgce<T: Real>(
    codes: &CodebookSet<T>,
    attn: &AttentionTable<T>,
    class: &str,
) -> Result<Vec<T>> {
    check_dims(codes, attn)?;
    let a = attn.activated(class)?;
    let mut e = vec![T::zero(); codes.dim];
    for (j, aj) in a.iter().enumerate() {
        contribution(codes, aj, j, &mut e);
    }
    Ok(e)
}

/// Contribution of codebook `j` alone (1-based, as in [`knockout_codebook`]).
pub fn codebook_contribution<T: Real>(
    codes: &CodebookSet<T>,
    attn: &AttentionTable<T>,
    class: &str,
    j: usize,
) -> Result<Vec<T>> {
    check_dims(codes, attn)?;
    check_book(codes, j)?;
    let a = attn.activated(class)?;
    let mut e = vec![T::zero(); codes.dim];
    contribution(codes, &a[j - 1], j - 1, &mut e);
    Ok(e)
}

fn check_book<T: Real>(codes: &CodebookSet<T>, j: usize) -> Result<()> {
    if j == 0 || j > codes.books {
        return Err(Error::Parameter(format!(
            "codebook index {j} outside 1..={}",
            codes.books
        )));
    }
    Ok(())
}

/// [`compose_cgce`] with codebook `j` (1-based) removed.
pub fn knockout_codebook<T: Real>(
    codes: &CodebookSet<T>,
    attn: &AttentionTable<T>,
    class: &str,
    j: usize,
) -> Result<Vec<T>> {
    check_dims(codes, attn)?;
    check_book(codes, j)?;
    let a = attn.activated(class)?;
    let mut e = vec![T::zero(); codes.dim];
    for (jj, aj) in a.iter().enumerate() {
        if jj + 1 != j {
            contribution(codes, aj, jj, &mut e);
        }
    }
    Ok(e)
}

/// Pulls `de = ∂L/∂e` back to the class's attention logits and, when
/// `codes_grad` is set, to the codes.
pub fn compose_cgce_backward<T: Real>(
    codes: &mut CodebookSet<T>,
    attn: &mut AttentionTable<T>,
    class: &str,
    de: &[T],
    codes_grad: bool,
) -> Result<()> {
    check_dims(codes, attn)?;
    if de.len() != codes.dim {
        return Err(Error::Dimension(format!(
            "embedding gradient of length {} for dimension {}",
            de.len(),
            codes.dim
        )));
    }
    let a = attn.activated(class)?;
    let m = codes.codes_per_book;
    let mut dw = Vec::with_capacity(codes.books * m);
    for (j, aj) in a.iter().enumerate() {
        let da: Vec<T> = (0..m)
            .map(|k| codes.code(j, k).iter().zip(de).map(|(&c, &d)| c * d).sum())
            .collect();
        dw.extend(sparsemax_backward(aj, &da));
    }
    if codes_grad {
        let dim = codes.dim;
        let g = codes.codes.grad.data_mut();
        for (j, aj) in a.iter().enumerate() {
            for (k, &ak) in aj.iter().enumerate() {
                if ak == T::zero() {
                    continue;
                }
                let off = (j * m + k) * dim;
                for (gi, &d) in g[off..off + dim].iter_mut().zip(de) {
                    *gi += ak * d;
                }
            }
        }
    }
    let row = attn.row_mut(class)?;
    for (g, d) in row.grad.data_mut().iter_mut().zip(dw) {
        *g += d;
    }
    Ok(())
}
