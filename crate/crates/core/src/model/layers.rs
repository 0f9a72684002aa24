use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::linalg::Matrix;

/// Uniform traversal of a parameter tree. `visit` and `visit_mut` yield
/// tensors in the same order; that order is the checkpoint layout.
pub trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>);

    fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x · w + b` with `w: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: T,
    pub b: T,
}

impl<T> Dense<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Dense<U> {
        Dense {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

impl<T> Visit<T> for Dense<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl Dense<Matrix> {
    /// Weights drawn from `N(0, 1 / fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Dense {
            w: normal_matrix(fan_in, fan_out, std, rng),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }
}

impl Dense<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = f64::from(dist.sample(rng) as f32);
    }
    m
}
