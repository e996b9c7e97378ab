//! Sequence-to-graph conversion.
//!
//! Every time step `i` of a fused sequence emits one capsule per node `j`
//! through its own weight matrix, dynamic routing condenses the `T × n`
//! capsules into `n` node embeddings, and scaled self-attention over the
//! nodes (clipped at zero) gives the adjacency.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::trace::{RoutingTrace, Stage};

#[derive(Clone, Debug, PartialEq)]
pub struct ConstructionConfig {
    /// Fused feature dimension `d`.
    pub d: usize,
    /// Capsule dimension `d_c`.
    pub d_c: usize,
    /// Node count `n`.
    pub nodes: usize,
    /// Routing iterations `p`.
    pub iterations: usize,
    /// Longest sequence per modality; capsule weights exist per position.
    pub max_len: [usize; 3],
    /// One weight set per node shared by all positions instead of one per
    /// (position, node) pair.
    pub shared_weights: bool,
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_c == 0 || self.nodes == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "d, d_c, node count and routing iterations must be at least 1".into(),
            ));
        }
        if self.max_len.contains(&0) {
            return Err(Error::Config("maximum sequence lengths must be at least 1".into()));
        }
        Ok(())
    }

    fn weight_positions(&self, m: Modality) -> usize {
        if self.shared_weights {
            1
        } else {
            self.max_len[m.index()]
        }
    }
}

/// How nodes are obtained from a fused sequence.
#[derive(Clone, Debug)]
pub enum NodeSource {
    /// Capsule weights per modality, `[positions × n × d_c × d]`.
    Capsules([ParamId; 3]),
    /// Every time step is a node, projected by `[d_c × d]` per modality.
    Direct([ParamId; 3]),
}

#[derive(Clone, Debug)]
pub struct ConstructionParams {
    pub nodes: NodeSource,
    /// Edge query/key projections per modality, `[d_c × d_c]`.
    pub wq: [ParamId; 3],
    pub wk: [ParamId; 3],
}

impl ConstructionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &ConstructionConfig,
        direct: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut node_w = Vec::with_capacity(3);
        let mut wq = Vec::with_capacity(3);
        let mut wk = Vec::with_capacity(3);
        for m in Modality::ALL {
            if direct {
                node_w.push(store.insert_normal(
                    format!("construct.{}.proj", m.tag()),
                    &[cfg.d_c, cfg.d],
                    (1.0 / cfg.d as f64).sqrt(),
                    rng,
                )?);
            } else {
                // A node sums T capsules at routing weight 1/n, so at full
                // length its entries start with standard deviation ~1/n.
                // Larger starts saturate the edges and stall training on
                // long sequences.
                let std = 1.0 / ((cfg.max_len[m.index()] * cfg.d * cfg.nodes) as f64).sqrt();
                node_w.push(store.insert_normal(
                    format!("construct.{}.caps_w", m.tag()),
                    &[cfg.weight_positions(m), cfg.nodes, cfg.d_c, cfg.d],
                    std,
                    rng,
                )?);
            }
            let s = (1.0 / cfg.d_c as f64).sqrt();
            wq.push(store.insert_normal(format!("construct.{}.wq", m.tag()), &[cfg.d_c, cfg.d_c], s, rng)?);
            wk.push(store.insert_normal(format!("construct.{}.wk", m.tag()), &[cfg.d_c, cfg.d_c], s, rng)?);
        }
        let arr = |v: &[ParamId]| -> [ParamId; 3] { [v[0], v[1], v[2]] };
        Ok(Self {
            nodes: if direct {
                NodeSource::Direct(arr(&node_w))
            } else {
                NodeSource::Capsules(arr(&node_w))
            },
            wq: arr(&wq),
            wk: arr(&wk),
        })
    }

    /// Capsule weight parameters, absent for direct node construction.
    pub fn capsule_weights(&self) -> Option<[ParamId; 3]> {
        match self.nodes {
            NodeSource::Capsules(w) => Some(w),
            NodeSource::Direct(_) => None,
        }
    }
}

/// Capsules `[T × n × d_c]` of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleBank {
    pub caps: Var,
}

/// `caps[i][j] = W_{i,j} · z_i`. Only the first `T` weight positions are
/// used, so a sequence shorter than the configured maximum behaves as if it
/// were zero padded with the padded steps masked out of routing.
pub fn make_capsules(tape: &Tape, weights: Var, z: Var, shared: bool) -> Result<CapsuleBank> {
    Ok(CapsuleBank {
        caps: tape.capsule_project(weights, z, shared)?,
    })
}

/// Dynamic routing over capsules `[S × U × d_c]`.
///
/// Logits start at zero; each iteration normalizes them with a softmax along
/// `axis` (1: over units for every source, 0: over sources for every unit),
/// forms every unit as the coefficient-weighted sum of its capsules, and
/// adds capsule/unit agreement to the logits. The agreement after the last
/// iteration would never be read, so it is not computed.
///
/// Returns the units `[d_c × U]` of the final iteration and the coefficient
/// node of every iteration.
pub(crate) fn route(tape: &Tape, caps: Var, axis: usize, iterations: usize) -> Result<(Var, Vec<Var>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(caps);
    let [s, u, _] = shape[..] else {
        return Err(Error::Shape(format!("capsules must be rank 3, got {shape:?}")));
    };
    let mut logits = tape.constant(Tensor::zeros(&[s, u]));
    let mut coefs = Vec::with_capacity(iterations);
    let mut units = None;
    for it in 0..iterations {
        let r = tape.softmax(logits, axis)?;
        let out = tape.weighted_sum(caps, r)?;
        coefs.push(r);
        units = Some(out);
        if it + 1 < iterations {
            logits = tape.add(logits, tape.agreement(caps, out)?)?;
        }
    }
    Ok((units.expect("at least one iteration"), coefs))
}

/// Node embeddings `[d_c × n]` from a capsule bank, plus the routing trace.
pub fn dynamic_route_nodes(
    tape: &Tape,
    bank: &CapsuleBank,
    iterations: usize,
    modality: Modality,
) -> Result<(Var, RoutingTrace)> {
    let (nodes, coefs) = route(tape, bank.caps, 1, iterations)?;
    let shape = tape.shape(bank.caps)[..2].to_vec();
    let trace = RoutingTrace {
        stage: Stage::Construction,
        modality,
        k: None,
        shape,
        iterations: coefs.iter().map(|&r| tape.value(r).into_data()).collect(),
        output_norms: column_norms(&tape.value(nodes)),
        capsule_norms: capsule_norms(&tape.value(bank.caps)),
    };
    Ok((nodes, trace))
}

/// Euclidean norm of every capsule of a `[S × U × d_c]` bank, row-major
/// over `S × U`.
pub(crate) fn capsule_norms(t: &Tensor) -> Vec<f64> {
    let d_c = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks(d_c)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn column_norms(t: &Tensor) -> Vec<f64> {
    let [rows, cols] = t.shape()[..] else {
        return Vec::new();
    };
    (0..cols)
        .map(|c| (0..rows).map(|r| t.at2(r, c).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `A = relu((W_q N)ᵀ (W_k N) / d_c)` for nodes `N[d_c × n]`.
pub fn build_edges(tape: &Tape, wq: Var, wk: Var, nodes: Var) -> Result<Var> {
    let d_c = tape.shape(nodes)[0];
    let q = tape.matmul(wq, nodes)?;
    let k = tape.matmul(wk, nodes)?;
    let scores = tape.matmul(tape.transpose(q)?, k)?;
    Ok(tape.relu(tape.scale(scores, 1.0 / d_c as f64)))
}

/// Node embeddings plus non-negative adjacency for one modality.
#[derive(Clone, Copy, Debug)]
pub struct ModalGraph {
    pub nodes: Var,
    pub adjacency: Var,
}

/// Builds the graph of one fused sequence. The routing trace is absent for
/// direct node construction.
pub fn construct_graph(
    tape: &Tape,
    params: &ConstructionParams,
    cfg: &ConstructionConfig,
    m: Modality,
    z: Var,
) -> Result<(ModalGraph, Option<RoutingTrace>)> {
    let len = tape.shape(z)[1];
    if len > cfg.max_len[m.index()] {
        return Err(Error::InvalidArgument(format!(
            "{m} sequence of length {len} exceeds the configured maximum {}",
            cfg.max_len[m.index()]
        )));
    }
    let (nodes, trace) = match &params.nodes {
        NodeSource::Capsules(w) => {
            let bank = make_capsules(tape, tape.param(w[m.index()]), z, cfg.shared_weights)?;
            let (nodes, trace) = dynamic_route_nodes(tape, &bank, cfg.iterations, m)?;
            (nodes, Some(trace))
        }
        NodeSource::Direct(proj) => (tape.matmul(tape.param(proj[m.index()]), z)?, None),
    };
    let adjacency = build_edges(
        tape,
        tape.param(params.wq[m.index()]),
        tape.param(params.wk[m.index()]),
        nodes,
    )?;
    Ok((ModalGraph { nodes, adjacency }, trace))
}

/// `λ · Σ_m Σ_{i,j} ‖W^m_{i,j}‖²` over the capsule weights of all three
/// modalities and nothing else.
pub fn capsule_l2_penalty(tape: &Tape, params: &ConstructionParams, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "L2 weight must be non-negative, got {lambda}"
        )));
    }
    let Some(weights) = params.capsule_weights() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let sq: Vec<Var> = weights
        .iter()
        .map(|&id| tape.sum_squares(tape.param(id)))
        .collect();
    let total = tape.add(tape.add(sq[0], sq[1])?, sq[2])?;
    Ok(tape.scale(total, lambda))
}
