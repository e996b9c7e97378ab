//! Plain-loop helpers shared by the integration tests.
#![allow(dead_code)]

use graphcage::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use graphcage::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Overwrites a parameter with uniform values in `[-scale, scale)`.
pub fn randomize(store: &mut ParamStore, id: ParamId, scale: f64, rng: &mut ChaCha8Rng) {
    for v in store.get_mut(id).tensor.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

/// Scalar reduction through a fixed pseudo-random weighting.
pub fn project(tape: &Tape, x: Var, seed: u64) -> Result<Var> {
    let w = random(&tape.shape(x), &mut rng(seed));
    let p = tape.mul(x, tape.constant(w))?;
    Ok(tape.sum_all(p))
}

pub fn rows(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-12)))
        .fold(0.0, f64::max)
}

pub fn param_rows(store: &ParamStore, id: ParamId) -> Mat {
    rows(store.tensor(id))
}

pub fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.tensor(id).data().to_vec()
}

/// Softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
