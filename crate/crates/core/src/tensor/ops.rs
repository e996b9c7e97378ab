use super::tape::{Op, Tape, Var};
use super::{dims2, dot, matmul_acc, split_axis};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape<'_> {
    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let out = self.val(&nodes, x).iter().map(|&v| f(v)).collect();
            (nodes[x.0].shape.clone(), out)
        };
        self.push(shape, out, op)
    }

    fn binary(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            if sa != sb {
                return Err(mismatch(name, sa, sb));
            }
            let out = self
                .val(&nodes, a)
                .iter()
                .zip(self.val(&nodes, b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa.clone(), out)
        };
        Ok(self.push(shape, out, op))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k) = dims2(sa)?;
            let (k2, n) = dims2(sb)?;
            if k != k2 {
                return Err(mismatch("matmul", sa, sb));
            }
            let mut out = vec![0.0; m * n];
            matmul_acc(self.val(&nodes, a), self.val(&nodes, b), &mut out, m, k, n);
            (vec![m, n], out)
        };
        Ok(self.push(shape, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (r, c) = dims2(&nodes[x.0].shape)?;
            let xv = self.val(&nodes, x);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xv[i * c + j];
                }
            }
            (vec![c, r], out)
        };
        Ok(self.push(shape, out, Op::Transpose(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.0].shape;
            if xs.iter().product::<usize>() != shape.iter().product::<usize>() {
                return Err(mismatch("reshape", xs, shape));
            }
            self.val(&nodes, x).to_vec()
        };
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x[d×T] + b[d]`, the bias repeated across columns.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_bias", x, b, |v, w| v + w, Op::AddBias(x, b))
    }

    /// `x[d×T] ⊙ g[d]`, the gain repeated across columns.
    pub fn mul_gain(&self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_gain", x, g, |v, w| v * w, Op::MulGain(x, g))
    }

    fn row_broadcast(
        &self,
        name: &str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (d, t) = dims2(&nodes[x.0].shape)?;
            if nodes[v.0].shape.iter().product::<usize>() != d {
                return Err(mismatch(name, &nodes[x.0].shape, &nodes[v.0].shape));
            }
            let (xv, vv) = (self.val(&nodes, x), self.val(&nodes, v));
            let mut out = Vec::with_capacity(d * t);
            for r in 0..d {
                out.extend(xv[r * t..(r + 1) * t].iter().map(|&a| f(a, vv[r])));
            }
            (vec![d, t], out)
        };
        Ok(self.push(shape, out, op))
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let shape = nodes[x.0].shape.clone();
            let (outer, len, inner) = split_axis(&shape, axis)?;
            let xv = self.val(&nodes, x);
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let idx = |k: usize| base + k * inner;
                    let max = (0..len).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for k in 0..len {
                        let e = (xv[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        sum += e;
                    }
                    for k in 0..len {
                        out[idx(k)] /= sum;
                    }
                }
            }
            (shape, out)
        };
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// Zero-mean, unit-variance normalization of every slice along `axis`
    /// (no affine part; compose with [`Tape::mul_gain`] and [`Tape::add_bias`]).
    pub fn layer_norm(&self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out, inv_std) = {
            let nodes = self.nodes.borrow();
            let shape = nodes[x.0].shape.clone();
            let (outer, len, inner) = split_axis(&shape, axis)?;
            let xv = self.val(&nodes, x);
            let mut out = vec![0.0; xv.len()];
            let mut inv_std = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mean = (0..len).map(|k| xv[base + k * inner]).sum::<f64>() / len as f64;
                    let var = (0..len)
                        .map(|k| (xv[base + k * inner] - mean).powi(2))
                        .sum::<f64>()
                        / len as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for k in 0..len {
                        out[base + k * inner] = (xv[base + k * inner] - mean) * inv;
                    }
                    inv_std.push(inv);
                }
            }
            (shape, out, inv_std)
        };
        Ok(self.push(shape, out, Op::LayerNorm { x, axis, inv_std }))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let first = inputs
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
            let mut shape = nodes[first.0].shape.clone();
            let (outer, _, inner) = split_axis(&shape, axis)?;
            let mut total = 0;
            for v in inputs {
                let s = &nodes[v.0].shape;
                let compatible = s.len() == shape.len()
                    && s.iter()
                        .zip(&shape)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &shape, s));
                }
                total += s[axis];
            }
            shape[axis] = total;
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let chunk = nodes[v.0].shape[axis] * inner;
                    out.extend_from_slice(&self.val(&nodes, *v)[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, out)
        };
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let mut shape = nodes[x.0].shape.clone();
            let (outer, full, inner) = split_axis(&shape, axis)?;
            if start + len > full {
                return Err(Error::Shape(format!(
                    "narrow [{start}, {}) exceeds extent {full} of axis {axis}",
                    start + len
                )));
            }
            let xv = self.val(&nodes, x);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&xv[base..base + len * inner]);
            }
            shape[axis] = len;
            (shape, out)
        };
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }))
    }

    /// Temporal convolution of `x[c_in × T]` with `kernel[c_out × c_in × w]`,
    /// zero padded so the output keeps length `T` (`⌊(w-1)/2⌋` steps on the left).
    pub fn conv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (c_in, t) = dims2(&nodes[x.0].shape)?;
            let ks = &nodes[kernel.0].shape;
            let [c_out, kc_in, w] = ks[..] else {
                return Err(Error::Shape(format!("conv1d kernel must be rank 3, got {ks:?}")));
            };
            if w == 0 {
                return Err(Error::InvalidArgument("conv1d kernel width must be positive".into()));
            }
            if kc_in != c_in {
                return Err(mismatch("conv1d", &nodes[x.0].shape, ks));
            }
            let pad = (w - 1) / 2;
            let (xv, kv) = (self.val(&nodes, x), self.val(&nodes, kernel));
            let mut out = vec![0.0; c_out * t];
            for o in 0..c_out {
                let orow = &mut out[o * t..(o + 1) * t];
                for c in 0..c_in {
                    let xrow = &xv[c * t..(c + 1) * t];
                    for k in 0..w {
                        let wk = kv[(o * c_in + c) * w + k];
                        for (pos, ov) in orow.iter_mut().enumerate() {
                            let src = pos + k;
                            if src >= pad && src - pad < t {
                                *ov += wk * xrow[src - pad];
                            }
                        }
                    }
                }
            }
            (vec![c_out, t], out)
        };
        Ok(self.push(shape, out, Op::Conv1d { x, kernel }))
    }

    /// `Σ aᵢ bᵢ` as a scalar node.
    pub fn inner_product(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            if sa != sb {
                return Err(mismatch("inner_product", sa, sb));
            }
            dot(self.val(&nodes, a), self.val(&nodes, b))
        };
        Ok(self.push(vec![], vec![out], Op::InnerProduct(a, b)))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            self.val(&nodes, x).iter().sum()
        };
        self.push(vec![], vec![s], Op::SumAll(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let v = self.val(&nodes, x);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![], vec![s], Op::Mean(x))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            self.val(&nodes, x).iter().map(|v| v * v).sum()
        };
        self.push(vec![], vec![s], Op::SumSquares(x))
    }

    /// Per-(position, unit) matrix-vector products.
    ///
    /// `weights` is `[P × n × d_c × d]` and `z` is `[d × T]`. The output is
    /// `[T × n × d_c]` with `out[i][j] = weights[i][j] · z[:, i]`; when `shared`
    /// is set, `P` must be 1 and the same matrices serve every position.
    pub fn capsule_project(&self, weights: Var, z: Var, shared: bool) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let ws = &nodes[weights.0].shape;
            let [p, n, dc, d] = ws[..] else {
                return Err(Error::Shape(format!("capsule weights must be rank 4, got {ws:?}")));
            };
            let (zd, t) = dims2(&nodes[z.0].shape)?;
            if zd != d {
                return Err(mismatch("capsule_project", ws, &nodes[z.0].shape));
            }
            if shared && p != 1 {
                return Err(Error::Shape(format!(
                    "shared capsule weights must have one position, got {p}"
                )));
            }
            if !shared && t > p {
                return Err(Error::InvalidArgument(format!(
                    "sequence length {t} exceeds the {p} positions with capsule weights"
                )));
            }
            let (wv, zv) = (self.val(&nodes, weights), self.val(&nodes, z));
            let mut col = vec![0.0; d];
            let mut out = vec![0.0; t * n * dc];
            for i in 0..t {
                for (e, c) in col.iter_mut().enumerate() {
                    *c = zv[e * t + i];
                }
                let wi = if shared { 0 } else { i };
                let wblock = &wv[wi * n * dc * d..(wi + 1) * n * dc * d];
                let oblock = &mut out[i * n * dc..(i + 1) * n * dc];
                for (o, wrow) in oblock.iter_mut().zip(wblock.chunks_exact(d)) {
                    *o = dot(wrow, &col);
                }
            }
            (vec![t, n, dc], out)
        };
        Ok(self.push(shape, out, Op::CapsuleProject { weights, z, shared }))
    }

    /// `out[:, j] = Σᵢ coef[i][j] · caps[i][j]` for `caps[T × n × d_c]`,
    /// `coef[T × n]`; output `[d_c × n]`.
    pub fn weighted_sum(&self, caps: Var, coef: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (t, n, dc) = caps_dims(&nodes[caps.0].shape)?;
            if nodes[coef.0].shape != [t, n] {
                return Err(mismatch("weighted_sum", &nodes[caps.0].shape, &nodes[coef.0].shape));
            }
            let (cv, rv) = (self.val(&nodes, caps), self.val(&nodes, coef));
            let mut out = vec![0.0; dc * n];
            for i in 0..t {
                for j in 0..n {
                    let r = rv[i * n + j];
                    let cap = &cv[(i * n + j) * dc..(i * n + j + 1) * dc];
                    for (c, &v) in cap.iter().enumerate() {
                        out[c * n + j] += r * v;
                    }
                }
            }
            (vec![dc, n], out)
        };
        Ok(self.push(shape, out, Op::WeightedSum { caps, coef }))
    }

    /// `out[i][j] = caps[i][j] · nodes[:, j]` (inner product), output `[T × n]`.
    pub fn agreement(&self, caps: Var, units: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (t, n, dc) = caps_dims(&nodes[caps.0].shape)?;
            if nodes[units.0].shape != [dc, n] {
                return Err(mismatch("agreement", &nodes[caps.0].shape, &nodes[units.0].shape));
            }
            let (cv, nv) = (self.val(&nodes, caps), self.val(&nodes, units));
            let mut out = vec![0.0; t * n];
            for i in 0..t {
                for j in 0..n {
                    let cap = &cv[(i * n + j) * dc..(i * n + j + 1) * dc];
                    out[i * n + j] = cap.iter().enumerate().map(|(c, &v)| v * nv[c * n + j]).sum();
                }
            }
            (vec![t, n], out)
        };
        Ok(self.push(shape, out, Op::Agreement { caps, nodes: units }))
    }
}

pub(crate) fn caps_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [t, n, dc] => Ok((*t, *n, *dc)),
        _ => Err(Error::Shape(format!("capsules must be rank 3, got {shape:?}"))),
    }
}
