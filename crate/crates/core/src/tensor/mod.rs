//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`]: every operation appends a node holding its output value and a
//! record of how it was produced, and [`Tape::backward`] walks those records
//! in reverse creation order (which is a topological order of the DAG) to
//! accumulate gradients.

mod backward;
pub mod checkpoint;
pub mod gradcheck;
mod ops;
mod param;
mod tape;

pub use gradcheck::{grad_check, grad_check_inputs, grad_check_params, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = dims2(&self.shape)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Largest absolute elementwise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("expected a matrix, got shape {shape:?}"))),
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) strides.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(4.0);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transpose2().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.at2(2, 1), 6.0);
        assert_eq!(tt.transpose2().unwrap(), t);
    }

    #[test]
    fn split_axis_strides() {
        assert_eq!(split_axis(&[2, 3, 4], 1).unwrap(), (2, 3, 4));
        assert!(split_axis(&[2, 3], 2).is_err());
    }
}
