//! Named parameter tensors and their gradients.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Flat coordinate `k` → (tensor, offset).
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return Some((i, k));
            }
            k -= t.len();
        }
        None
    }

    /// `self ← m·self + (1−m)·source`, elementwise.
    pub fn blend_from(&mut self, source: &ParamSet, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
        }
        if !self.same_layout(source) {
            return Err(Error::Shape("teacher and student layouts differ".into()));
        }
        if m == 1.0 {
            return Ok(());
        }
        if m == 0.0 {
            self.tensors.clone_from(&source.tensors);
            return Ok(());
        }
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            for (a, b) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}

/// Gradient buffers laid out exactly like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads {
            tensors: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn flat(&self, k: usize) -> f64 {
        let mut k = k;
        for t in &self.tensors {
            if k < t.len() {
                return t.as_slice()[k];
            }
            k -= t.len();
        }
        panic!("gradient coordinate out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}
