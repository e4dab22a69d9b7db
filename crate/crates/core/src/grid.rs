//! Token grids and per-token probability fields.

use crate::error::{Error, Result};

/// Side lengths of a 1-, 2- or 3-dimensional grid, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridShape {
    dims: Vec<usize>,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Shape(format!(
                "grid must have 1 to 3 dimensions, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape("zero-length grid side".into()));
        }
        Ok(GridShape {
            dims: dims.to_vec(),
        })
    }

    /// Cubic grid `N^dim`.
    pub fn cube(n: usize, dim: usize) -> Result<Self> {
        Self::new(&vec![n; dim])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Common side length if all sides are equal.
    pub fn side(&self) -> Option<usize> {
        let n = self.dims[0];
        self.dims.iter().all(|&d| d == n).then_some(n)
    }

    pub fn index(&self, coord: &[usize]) -> usize {
        debug_assert_eq!(coord.len(), self.dims.len());
        coord
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn coord(&self, mut index: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for (axis, &d) in self.dims.iter().enumerate().rev() {
            out[axis] = index % d;
            index /= d;
        }
        out
    }
}

/// A length-`L` sequence of categorical tokens in `{0..K-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    shape: GridShape,
    k: usize,
    tokens: Vec<u8>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, k: usize, tokens: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&k) {
            return Err(Error::Shape(format!("K must be in 2..=256, got {k}")));
        }
        if tokens.len() != shape.len() {
            return Err(Error::Shape(format!(
                "token count {} does not match grid size {}",
                tokens.len(),
                shape.len()
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= k) {
            return Err(Error::Validation(format!(
                "token {} at index {pos} is not below K={k}",
                tokens[pos]
            )));
        }
        Ok(TokenGrid { shape, k, tokens })
    }

    pub fn filled(shape: GridShape, k: usize, value: u8) -> Result<Self> {
        let len = shape.len();
        Self::new(shape, k, vec![value; len])
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u8> {
        self.tokens
    }

    /// Number of tokens equal to `category`.
    pub fn count(&self, category: u8) -> usize {
        self.tokens.iter().filter(|&&t| t == category).count()
    }

    pub fn hamming(&self, other: &TokenGrid) -> usize {
        self.tokens
            .iter()
            .zip(&other.tokens)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Same tokens reinterpreted with a larger category count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.shape.clone(), k, self.tokens.clone())
    }

    pub(crate) fn tokens_mut(&mut self) -> &mut [u8] {
        &mut self.tokens
    }

    pub(crate) fn from_parts_unchecked(shape: GridShape, k: usize, tokens: Vec<u8>) -> Self {
        debug_assert_eq!(shape.len(), tokens.len());
        TokenGrid { shape, k, tokens }
    }
}

/// Per-token probability vectors stored as an `L x K` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    shape: GridShape,
    k: usize,
    probs: Vec<f64>,
}

impl ProbField {
    pub fn new(shape: GridShape, k: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != shape.len() * k {
            return Err(Error::Shape(format!(
                "probability buffer has {} entries, expected {}",
                probs.len(),
                shape.len() * k
            )));
        }
        Ok(ProbField { shape, k, probs })
    }

    pub fn uniform(shape: GridShape, k: usize) -> Self {
        let len = shape.len() * k;
        ProbField {
            shape,
            k,
            probs: vec![1.0 / k as f64; len],
        }
    }

    pub fn one_hot(grid: &TokenGrid, k: usize) -> Self {
        let mut probs = vec![0.0; grid.len() * k];
        for (i, &t) in grid.tokens().iter().enumerate() {
            probs[i * k + t as usize] = 1.0;
        }
        ProbField {
            shape: grid.shape().clone(),
            k,
            probs,
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.k)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Largest deviation of any row sum from 1, or `None` if a negative entry exists.
    pub fn simplex_error(&self) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for row in self.rows() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return None;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }

    /// Per-row argmax, ties resolved to the lowest category.
    pub fn argmax(&self) -> Vec<u8> {
        self.rows().map(|r| argmax_row(r) as u8).collect()
    }
}

/// Index of the largest entry; the first one wins on exact ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}
