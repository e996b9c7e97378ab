//! Graph aggregation: two rounds of graph convolution, each followed by a
//! readout of the node set into one representation vector, and the final
//! regression head over the six representations.
//!
//! Every weight here is shared by the three modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::construction::{capsule_norms, column_norms, route};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::trace::{RoutingTrace, Stage};

/// Number of graph-convolution iterations.
pub const GCN_ITERATIONS: usize = 2;

/// How a node set is condensed into one representation vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Capsule routing over per-node capsules.
    Capsule,
    /// Average node embedding.
    Mean,
    /// Softmax attention pooling with learned scores.
    Attention,
    /// LSTM over the nodes in index order; last hidden state.
    Recurrent,
}

#[derive(Clone, Debug)]
pub struct StepParams {
    /// `W^k` and `W^k_o`, `[d_c × d_c]`.
    pub w: ParamId,
    pub w_o: ParamId,
    pub readout: ReadoutParams,
}

#[derive(Clone, Debug)]
pub enum ReadoutParams {
    /// Per-node capsule weights `W^k_j`, `[max_nodes × 1 × d_c × d_c]`.
    Capsule { caps_w: ParamId },
    Mean,
    Attention { w: ParamId, score: ParamId },
    Recurrent { w_x: ParamId, w_h: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct GcnParams {
    pub steps: [StepParams; GCN_ITERATIONS],
}

impl GcnParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        d_c: usize,
        max_nodes: usize,
        readout: Readout,
        rng: &mut R,
    ) -> Result<Self> {
        if d_c == 0 || max_nodes == 0 {
            return Err(Error::Config("d_c and node count must be at least 1".into()));
        }
        let s = (1.0 / d_c as f64).sqrt();
        let mut step = |k: usize| -> Result<StepParams> {
            let pre = format!("aggregate.k{k}");
            let w = store.insert_normal(format!("{pre}.w"), &[d_c, d_c], s, rng)?;
            let w_o = store.insert_normal(format!("{pre}.w_o"), &[d_c, d_c], s, rng)?;
            let readout = match readout {
                Readout::Capsule => ReadoutParams::Capsule {
                    caps_w: store.insert_normal(
                        format!("{pre}.caps_w"),
                        &[max_nodes, 1, d_c, d_c],
                        s,
                        rng,
                    )?,
                },
                Readout::Mean => ReadoutParams::Mean,
                Readout::Attention => ReadoutParams::Attention {
                    w: store.insert_normal(format!("{pre}.att_w"), &[d_c, d_c], s, rng)?,
                    score: store.insert_normal(format!("{pre}.att_score"), &[1, d_c], s, rng)?,
                },
                Readout::Recurrent => ReadoutParams::Recurrent {
                    w_x: store.insert_normal(format!("{pre}.lstm_wx"), &[4 * d_c, d_c], s, rng)?,
                    w_h: store.insert_normal(format!("{pre}.lstm_wh"), &[4 * d_c, d_c], s, rng)?,
                    bias: store.insert_filled(format!("{pre}.lstm_b"), &[4 * d_c], 0.0)?,
                },
            };
            Ok(StepParams { w, w_o, readout })
        };
        Ok(Self {
            steps: [step(1)?, step(2)?],
        })
    }

    /// Every parameter used at iteration `k` (1-based).
    pub fn step_param_ids(&self, k: usize) -> Vec<ParamId> {
        let s = &self.steps[k - 1];
        let mut ids = vec![s.w, s.w_o];
        match s.readout {
            ReadoutParams::Capsule { caps_w } => ids.push(caps_w),
            ReadoutParams::Mean => {}
            ReadoutParams::Attention { w, score } => ids.extend([w, score]),
            ReadoutParams::Recurrent { w_x, w_h, bias } => ids.extend([w_x, w_h, bias]),
        }
        ids
    }
}

fn check_k(k: usize) -> Result<()> {
    if (1..=GCN_ITERATIONS).contains(&k) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "graph convolution iteration {k} outside 1..={GCN_ITERATIONS}"
        )))
    }
}

/// `N^k = tanh(W^k_o · (W^k · N^{k-1} · (A + I)))`, adjacency used as is.
pub fn gcn_step(tape: &Tape, params: &GcnParams, nodes: Var, adjacency: Var, k: usize) -> Result<Var> {
    check_k(k)?;
    let step = &params.steps[k - 1];
    let n = tape.shape(adjacency)[0];
    let self_loop = tape.add(adjacency, tape.constant(Tensor::eye(n)))?;
    let h = tape.matmul(tape.param(step.w), nodes)?;
    let h = tape.matmul(h, self_loop)?;
    let h = tape.matmul(tape.param(step.w_o), h)?;
    Ok(tape.tanh(h))
}

/// One representation `R^{m,k}` (`[d_c × 1]`).
#[derive(Clone, Copy, Debug)]
pub struct GraphRepresentation {
    pub modality: Modality,
    pub k: usize,
    pub r: Var,
}

/// Capsule readout: one capsule `W^k_j N_j` per node, routed into a single
/// representation over `iterations` rounds.
pub fn capsnet_aggregate(
    tape: &Tape,
    caps_w: Var,
    nodes: Var,
    iterations: usize,
    modality: Modality,
    k: usize,
) -> Result<(GraphRepresentation, RoutingTrace)> {
    check_k(k)?;
    let shape = tape.shape(nodes);
    let [d_c, n] = shape[..] else {
        return Err(Error::Shape(format!("nodes must be d_c × n, got {shape:?}")));
    };
    let caps = tape.capsule_project(caps_w, nodes, false)?;
    let (r, coefs) = route(tape, caps, 0, iterations)?;
    debug_assert_eq!(tape.shape(r), [d_c, 1]);
    let trace = RoutingTrace {
        stage: Stage::Aggregation,
        modality,
        k: Some(k),
        shape: vec![n],
        iterations: coefs.iter().map(|&c| tape.value(c).into_data()).collect(),
        output_norms: column_norms(&tape.value(r)),
        capsule_norms: capsule_norms(&tape.value(caps)),
    };
    Ok((GraphRepresentation { modality, k, r }, trace))
}

/// Per-node capsules `[n × d_c]` as used by [`capsnet_aggregate`], for
/// inspection.
pub fn aggregation_capsules(tape: &Tape, caps_w: Var, nodes: Var) -> Result<Tensor> {
    let caps = tape.capsule_project(caps_w, nodes, false)?;
    let t = tape.value(caps);
    let (n, d_c) = (t.shape()[0], t.shape()[2]);
    t.reshape(&[n, d_c])
}

/// Condenses nodes at iteration `k` with the configured readout. The trace
/// is only produced by the capsule readout.
pub fn aggregate(
    tape: &Tape,
    params: &GcnParams,
    nodes: Var,
    iterations: usize,
    modality: Modality,
    k: usize,
) -> Result<(GraphRepresentation, Option<RoutingTrace>)> {
    check_k(k)?;
    let shape = tape.shape(nodes);
    let (d_c, n) = (shape[0], shape[1]);
    let rep = |r| GraphRepresentation { modality, k, r };
    match &params.steps[k - 1].readout {
        ReadoutParams::Capsule { caps_w } => {
            let (rep, trace) =
                capsnet_aggregate(tape, tape.param(*caps_w), nodes, iterations, modality, k)?;
            Ok((rep, Some(trace)))
        }
        ReadoutParams::Mean => {
            let avg = tape.constant(Tensor::new(&[n, 1], vec![1.0 / n as f64; n])?);
            Ok((rep(tape.matmul(nodes, avg)?), None))
        }
        ReadoutParams::Attention { w, score } => {
            let h = tape.tanh(tape.matmul(tape.param(*w), nodes)?);
            let e = tape.matmul(tape.param(*score), h)?;
            let a = tape.softmax(e, 1)?;
            Ok((rep(tape.matmul(nodes, tape.transpose(a)?)?), None))
        }
        ReadoutParams::Recurrent { w_x, w_h, bias } => {
            let (wx, wh, b) = (tape.param(*w_x), tape.param(*w_h), tape.param(*bias));
            let mut h = tape.constant(Tensor::zeros(&[d_c, 1]));
            let mut c = tape.constant(Tensor::zeros(&[d_c, 1]));
            for j in 0..n {
                let x = tape.narrow(nodes, 1, j, 1)?;
                let gates = tape.add(tape.matmul(wx, x)?, tape.matmul(wh, h)?)?;
                let gates = tape.add_bias(gates, b)?;
                let i_g = tape.sigmoid(tape.narrow(gates, 0, 0, d_c)?);
                let f_g = tape.sigmoid(tape.narrow(gates, 0, d_c, d_c)?);
                let g_g = tape.tanh(tape.narrow(gates, 0, 2 * d_c, d_c)?);
                let o_g = tape.sigmoid(tape.narrow(gates, 0, 3 * d_c, d_c)?);
                c = tape.add(tape.mul(f_g, c)?, tape.mul(i_g, g_g)?)?;
                h = tape.mul(o_g, tape.tanh(c))?;
            }
            Ok((rep(h), None))
        }
    }
}

/// Two affine layers with a ReLU between them, `6·d_c → 3·d_c → 1`.
#[derive(Clone, Debug)]
pub struct ReadoutHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ReadoutHead {
    pub fn register<R: Rng>(store: &mut ParamStore, d_c: usize, rng: &mut R) -> Result<Self> {
        let (inp, hid) = (3 * GCN_ITERATIONS * d_c, 3 * d_c);
        Ok(Self {
            w1: store.insert_normal("head.w1", &[hid, inp], (1.0 / inp as f64).sqrt(), rng)?,
            b1: store.insert_filled("head.b1", &[hid], 0.0)?,
            w2: store.insert_normal("head.w2", &[1, hid], (1.0 / hid as f64).sqrt(), rng)?,
            b2: store.insert_filled("head.b2", &[1], 0.0)?,
        })
    }
}

/// Concatenates the representations (for `k = 1, 2`, each in text, audio,
/// vision order) and maps them to a scalar sentiment score `[1 × 1]`.
pub fn readout(tape: &Tape, head: &ReadoutHead, reps: &[GraphRepresentation]) -> Result<Var> {
    let mut ordered = Vec::with_capacity(3 * GCN_ITERATIONS);
    for k in 1..=GCN_ITERATIONS {
        for m in Modality::ALL {
            let rep = reps
                .iter()
                .find(|r| r.k == k && r.modality == m)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("missing representation for {m}, k = {k}"))
                })?;
            ordered.push(rep.r);
        }
    }
    let x = tape.concat(&ordered, 0)?;
    let h = tape.matmul(tape.param(head.w1), x)?;
    let h = tape.relu(tape.add_bias(h, tape.param(head.b1))?);
    let y = tape.matmul(tape.param(head.w2), h)?;
    tape.add_bias(y, tape.param(head.b2))
}
