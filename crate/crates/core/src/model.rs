use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, GcnParams, GraphRepresentation, Readout, ReadoutHead, GCN_ITERATIONS};
use crate::construction::{self, ConstructionConfig, ConstructionParams, ModalGraph};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, FusionParams};
use crate::modality::{ModalBundle, Modality};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::trace::RoutingTrace;

/// Full model or one of the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "capsule")]
    Capsule,
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "attention")]
    Attention,
    #[serde(rename = "recurrent")]
    Recurrent,
    /// Every time step is a node; capsule readout in aggregation.
    #[serde(rename = "no-caps", alias = "no-caps-construction")]
    NoCaps,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Capsule,
        Strategy::Mean,
        Strategy::Attention,
        Strategy::Recurrent,
        Strategy::NoCaps,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "capsule" => Ok(Strategy::Capsule),
            "mean" => Ok(Strategy::Mean),
            "attention" | "gat" => Ok(Strategy::Attention),
            "recurrent" | "lstm" => Ok(Strategy::Recurrent),
            "no-caps" | "no-caps-construction" => Ok(Strategy::NoCaps),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Capsule => "capsule",
            Strategy::Mean => "mean",
            Strategy::Attention => "attention",
            Strategy::Recurrent => "recurrent",
            Strategy::NoCaps => "no-caps",
        }
    }

    pub fn readout(self) -> Readout {
        match self {
            Strategy::Capsule | Strategy::NoCaps => Readout::Capsule,
            Strategy::Mean => Readout::Mean,
            Strategy::Attention => Readout::Attention,
            Strategy::Recurrent => Readout::Recurrent,
        }
    }

    pub fn direct_construction(self) -> bool {
        self == Strategy::NoCaps
    }
}

/// Architecture hyperparameters; stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_audio: usize,
    pub d_vision: usize,
    pub max_len_text: usize,
    pub max_len_audio: usize,
    pub max_len_vision: usize,
    pub d_h: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub kernel_width: usize,
    pub source_positional: bool,
    pub d_c: usize,
    pub nodes: usize,
    pub routing_iters: usize,
    pub shared_capsule_weights: bool,
    pub strategy: Strategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_text: 10,
            d_audio: 8,
            d_vision: 8,
            max_len_text: 20,
            max_len_audio: 120,
            max_len_vision: 150,
            d_h: 8,
            depth: 2,
            heads: 2,
            ffn_hidden: 32,
            kernel_width: 1,
            source_positional: true,
            d_c: 16,
            nodes: 12,
            routing_iters: 2,
            shared_capsule_weights: false,
            strategy: Strategy::Capsule,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> [usize; 3] {
        [self.d_text, self.d_audio, self.d_vision]
    }

    pub fn max_len(&self) -> [usize; 3] {
        [self.max_len_text, self.max_len_audio, self.max_len_vision]
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d_h: self.d_h,
            depth: self.depth,
            heads: self.heads,
            kernel_width: self.kernel_width,
            ffn_hidden: self.ffn_hidden,
            source_positional: self.source_positional,
        }
    }

    pub fn construction(&self) -> ConstructionConfig {
        ConstructionConfig {
            d: self.fusion().fused_dim(),
            d_c: self.d_c,
            nodes: self.nodes,
            iterations: self.routing_iters,
            max_len: self.max_len(),
            shared_weights: self.shared_capsule_weights,
        }
    }

    /// Upper bound on the node count of any graph this model builds.
    pub fn max_nodes(&self) -> usize {
        if self.strategy.direct_construction() {
            self.max_len().into_iter().max().unwrap_or(1)
        } else {
            self.nodes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Config("feature dimensions must be at least 1".into()));
        }
        self.fusion().validate()?;
        self.construction().validate()
    }
}

/// Everything a forward pass produces.
pub struct Forward {
    /// `[1 × 1]` sentiment score.
    pub prediction: Var,
    /// Fused sequences `Z^m`, indexed by modality.
    pub fused: [Var; 3],
    pub graphs: [ModalGraph; 3],
    /// Node embeddings after each graph convolution, `[modality][k - 1]`.
    pub convolved: [[Var; GCN_ITERATIONS]; 3],
    pub reps: Vec<GraphRepresentation>,
    /// Construction traces (one per modality, capsule construction only)
    /// followed by aggregation traces (capsule readout only).
    pub traces: Vec<RoutingTrace>,
}

#[derive(Clone, Debug)]
pub struct GraphCage {
    cfg: ModelConfig,
    store: ParamStore,
    pub fusion: FusionParams,
    pub construction: ConstructionParams,
    pub gcn: GcnParams,
    pub head: ReadoutHead,
}

impl GraphCage {
    /// Builds a freshly initialized model; initialization depends only on
    /// `cfg` and `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fusion = FusionParams::register(&mut store, cfg.dims(), &cfg.fusion(), &mut rng)?;
        let construction = ConstructionParams::register(
            &mut store,
            &cfg.construction(),
            cfg.strategy.direct_construction(),
            &mut rng,
        )?;
        let gcn = GcnParams::register(
            &mut store,
            cfg.d_c,
            cfg.max_nodes(),
            cfg.strategy.readout(),
            &mut rng,
        )?;
        let head = ReadoutHead::register(&mut store, cfg.d_c, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            fusion,
            construction,
            gcn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        Checkpoint::from_store(&self.store, serde_json::json!({ "model": meta }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }

    /// Rejects bundles whose feature dimensions or lengths do not fit.
    pub fn check_bundle(&self, bundle: &ModalBundle) -> Result<()> {
        for m in Modality::ALL {
            let (d, t) = (bundle.dim(m), bundle.len(m));
            if d != self.cfg.dims()[m.index()] {
                return Err(Error::Dataset(format!(
                    "{m} features have dimension {d}, model expects {}",
                    self.cfg.dims()[m.index()]
                )));
            }
            if t > self.cfg.max_len()[m.index()] {
                return Err(Error::Dataset(format!(
                    "{m} sequence of length {t} exceeds the configured maximum {}",
                    self.cfg.max_len()[m.index()]
                )));
            }
        }
        Ok(())
    }

    /// Forward pass over raw sequences already placed on `tape`, which must
    /// have been created from [`GraphCage::params`].
    pub fn forward_vars(&self, tape: &Tape, raw: [Var; 3]) -> Result<Forward> {
        let fcfg = self.cfg.fusion();
        let ccfg = self.cfg.construction();
        let fused = fusion::fuse_modalities(tape, &self.fusion, raw, &fcfg)?;

        let mut construction_traces = Vec::new();
        let mut aggregation_traces = Vec::new();
        let mut reps = Vec::with_capacity(3 * GCN_ITERATIONS);
        let mut graphs = Vec::with_capacity(3);
        let mut convolved = Vec::with_capacity(3);
        for f in fused {
            let m = f.modality;
            let (graph, trace) = construction::construct_graph(tape, &self.construction, &ccfg, m, f.z)?;
            construction_traces.extend(trace);
            let mut nodes = graph.nodes;
            let mut per_k = [nodes; GCN_ITERATIONS];
            for k in 1..=GCN_ITERATIONS {
                nodes = aggregation::gcn_step(tape, &self.gcn, nodes, graph.adjacency, k)?;
                per_k[k - 1] = nodes;
                let (rep, trace) =
                    aggregation::aggregate(tape, &self.gcn, nodes, self.cfg.routing_iters, m, k)?;
                reps.push(rep);
                aggregation_traces.extend(trace);
            }
            graphs.push(graph);
            convolved.push(per_k);
        }
        let prediction = aggregation::readout(tape, &self.head, &reps)?;
        construction_traces.extend(aggregation_traces);
        Ok(Forward {
            prediction,
            fused: fused.map(|f| f.z),
            graphs: [graphs[0], graphs[1], graphs[2]],
            convolved: [convolved[0], convolved[1], convolved[2]],
            reps,
            traces: construction_traces,
        })
    }

    pub fn forward(&self, tape: &Tape, bundle: &ModalBundle) -> Result<Forward> {
        self.check_bundle(bundle)?;
        let raw = Modality::ALL.map(|m| tape.constant(bundle.get(m).clone()));
        self.forward_vars(tape, raw)
    }

    pub fn predict(&self, bundle: &ModalBundle) -> Result<f64> {
        let tape = Tape::new(&self.store);
        let out = self.forward(&tape, bundle)?;
        Ok(tape.scalar(out.prediction))
    }

    /// Prediction and routing traces of one example.
    pub fn inspect(&self, bundle: &ModalBundle) -> Result<(f64, Vec<RoutingTrace>)> {
        let tape = Tape::new(&self.store);
        let out = self.forward(&tape, bundle)?;
        Ok((tape.scalar(out.prediction), out.traces))
    }

    /// `weight · |ŷ − y|` for one example and its parameter gradients
    /// (indexed by parameter; `None` for parameters the example does not
    /// touch). Returns `(ŷ, |ŷ − y|, gradients)`.
    pub fn example_gradients(
        &self,
        bundle: &ModalBundle,
        label: f64,
        weight: f64,
    ) -> Result<(f64, f64, Vec<Option<Vec<f64>>>)> {
        let tape = Tape::new(&self.store);
        let out = self.forward(&tape, bundle)?;
        let y = tape.constant(Tensor::new(&[1, 1], vec![label])?);
        let err = tape.abs(tape.sub(out.prediction, y)?);
        let loss = tape.scale(tape.sum_all(err), weight);
        let pred = tape.scalar(out.prediction);
        let abs_err = tape.scalar(err);
        let grads = tape.backward(loss)?;
        Ok((pred, abs_err, grads.into_param_grads()))
    }

    /// The capsule L2 penalty and its parameter gradients.
    pub fn penalty_gradients(&self, lambda: f64) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let tape = Tape::new(&self.store);
        let pen = construction::capsule_l2_penalty(&tape, &self.construction, lambda)?;
        let value = tape.scalar(pen);
        if self.construction.capsule_weights().is_none() {
            return Ok((value, vec![None; self.store.len()]));
        }
        Ok((value, tape.backward(pen)?.into_param_grads()))
    }
}
