use super::ops::caps_dims;
use super::tape::{Node, Op, Tape, Var};
use super::{dot, matmul_at_acc, matmul_bt_acc, split_axis};

type Grads = [Option<Vec<f64>>];

/// Gradient buffer for `v`, created zeroed on first touch. `None` when `v`
/// does not take part in differentiation.
fn slot<'g>(nodes: &[Node], grads: &'g mut Grads, v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.shape.iter().product();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape<'_> {
    pub(crate) fn backward_node(&self, nodes: &[Node], id: usize, g: &[f64], grads: &mut Grads) {
        let out = self.val(nodes, Var(id));
        let shape = &nodes[id].shape;
        match &nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_acc(g, self.val(nodes, *b), ga, m, k, n);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(self.val(nodes, *a), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &v), &w) in ga.iter_mut().zip(g).zip(self.val(nodes, *b)) {
                        *d += v * w;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, &v), &w) in gb.iter_mut().zip(g).zip(self.val(nodes, *a)) {
                        *d += v * w;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::AddBias(x, b) => {
                let t = shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (r, d) in gb.iter_mut().enumerate() {
                        *d += g[r * t..(r + 1) * t].iter().sum::<f64>();
                    }
                }
            }
            Op::MulGain(x, gain) => {
                let t = shape[1];
                let xv = self.val(nodes, *x);
                let gv = self.val(nodes, *gain);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &w) in gv.iter().enumerate() {
                        for c in r * t..(r + 1) * t {
                            gx[c] += g[c] * w;
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (r, d) in gg.iter_mut().enumerate() {
                        *d += dot(&g[r * t..(r + 1) * t], &xv[r * t..(r + 1) * t]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.val(nodes, *x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += v * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.val(nodes, *x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += v;
                        } else if xi < 0.0 {
                            *d -= v;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let Ok((outer, len, inner)) = split_axis(shape, *axis) else { return };
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s: f64 = (0..len)
                                .map(|k| g[base + k * inner] * out[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let p = base + k * inner;
                                gx[p] += out[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let Ok((outer, len, inner)) = split_axis(shape, *axis) else { return };
                if let Some(gx) = slot(nodes, grads, *x) {
                    let nf = len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let inv = inv_std[o * inner + i];
                            let idx = |k: usize| base + k * inner;
                            let mg = (0..len).map(|k| g[idx(k)]).sum::<f64>() / nf;
                            let mgy = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum::<f64>() / nf;
                            for k in 0..len {
                                let p = idx(k);
                                gx[p] += inv * (g[p] - mg - out[p] * mgy);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let Ok((outer, total, inner)) = split_axis(shape, *axis) else { return };
                let mut offset = 0;
                for v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    if let Some(gv) = slot(nodes, grads, *v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = nodes[x.0].shape[*axis];
                let Ok((outer, len, inner)) = split_axis(shape, *axis) else { return };
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        add_into(
                            &mut gx[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Conv1d { x, kernel } => {
                let (c_in, t) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (c_out, w) = (nodes[kernel.0].shape[0], nodes[kernel.0].shape[2]);
                let pad = (w - 1) / 2;
                let xv = self.val(nodes, *x);
                let kv = self.val(nodes, *kernel);
                let taps = |o: usize, c: usize, k: usize| {
                    (0..t).filter_map(move |pos| {
                        let src = pos + k;
                        (src >= pad && src - pad < t).then(|| (o * t + pos, c * t + src - pad))
                    })
                };
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for k in 0..w {
                                let wk = kv[(o * c_in + c) * w + k];
                                for (oi, xi) in taps(o, c, k) {
                                    gx[xi] += wk * g[oi];
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot(nodes, grads, *kernel) {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for k in 0..w {
                                gk[(o * c_in + c) * w + k] +=
                                    taps(o, c, k).map(|(oi, xi)| g[oi] * xv[xi]).sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::InnerProduct(a, b) => {
                let s = g[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, &w) in ga.iter_mut().zip(self.val(nodes, *b)) {
                        *d += s * w;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, &w) in gb.iter_mut().zip(self.val(nodes, *a)) {
                        *d += s * w;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumSquares(x) => {
                let xv = self.val(nodes, *x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(xv) {
                        *d += 2.0 * g[0] * v;
                    }
                }
            }
            Op::CapsuleProject { weights, z, shared } => {
                let ws = &nodes[weights.0].shape;
                let (n, dc, d) = (ws[1], ws[2], ws[3]);
                let t = nodes[z.0].shape[1];
                let wv = self.val(nodes, *weights);
                let zv = self.val(nodes, *z);
                let mut col = vec![0.0; d];
                let block = n * dc * d;
                if let Some(gw) = slot(nodes, grads, *weights) {
                    for i in 0..t {
                        for (e, c) in col.iter_mut().enumerate() {
                            *c = zv[e * t + i];
                        }
                        let wi = if *shared { 0 } else { i };
                        let gblock = &mut gw[wi * block..(wi + 1) * block];
                        for (grow, &gi) in gblock.chunks_exact_mut(d).zip(&g[i * n * dc..]) {
                            if gi != 0.0 {
                                for (dst, &c) in grow.iter_mut().zip(&col) {
                                    *dst += gi * c;
                                }
                            }
                        }
                    }
                }
                if let Some(gz) = slot(nodes, grads, *z) {
                    for i in 0..t {
                        col.iter_mut().for_each(|c| *c = 0.0);
                        let wi = if *shared { 0 } else { i };
                        let wblock = &wv[wi * block..(wi + 1) * block];
                        for (wrow, &gi) in wblock.chunks_exact(d).zip(&g[i * n * dc..]) {
                            for (c, &w) in col.iter_mut().zip(wrow) {
                                *c += gi * w;
                            }
                        }
                        for (e, &c) in col.iter().enumerate() {
                            gz[e * t + i] += c;
                        }
                    }
                }
            }
            Op::WeightedSum { caps, coef } => {
                let Ok((t, n, dc)) = caps_dims(&nodes[caps.0].shape) else { return };
                let cv = self.val(nodes, *caps);
                let rv = self.val(nodes, *coef);
                if let Some(gc) = slot(nodes, grads, *caps) {
                    for i in 0..t {
                        for j in 0..n {
                            let r = rv[i * n + j];
                            let base = (i * n + j) * dc;
                            for c in 0..dc {
                                gc[base + c] += r * g[c * n + j];
                            }
                        }
                    }
                }
                if let Some(gr) = slot(nodes, grads, *coef) {
                    for i in 0..t {
                        for j in 0..n {
                            let base = (i * n + j) * dc;
                            gr[i * n + j] +=
                                (0..dc).map(|c| cv[base + c] * g[c * n + j]).sum::<f64>();
                        }
                    }
                }
            }
            Op::Agreement { caps, nodes: units } => {
                let Ok((t, n, dc)) = caps_dims(&nodes[caps.0].shape) else { return };
                let cv = self.val(nodes, *caps);
                let uv = self.val(nodes, *units);
                if let Some(gc) = slot(nodes, grads, *caps) {
                    for i in 0..t {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let base = (i * n + j) * dc;
                            for c in 0..dc {
                                gc[base + c] += gij * uv[c * n + j];
                            }
                        }
                    }
                }
                if let Some(gu) = slot(nodes, grads, *units) {
                    for i in 0..t {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let base = (i * n + j) * dc;
                            for c in 0..dc {
                                gu[c * n + j] += gij * cv[base + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
