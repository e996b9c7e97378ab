//! Cross-modal fusion: each target modality receives two cross-modal
//! transformer outputs (one per source modality), concatenated along the
//! feature axis.
//!
//! All sequences are laid out `features × time`. A cross-modal transformer
//! projects both inputs to `d_h` channels with a temporal convolution, adds
//! sinusoidal position codes, then runs `depth` pre-norm attention blocks in
//! which the target attends to the fixed layer-0 source encoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub d_h: usize,
    pub depth: usize,
    pub heads: usize,
    /// Width of the input projection convolution.
    pub kernel_width: usize,
    /// Hidden width of the position-wise feed-forward sublayer.
    pub ffn_hidden: usize,
    /// Whether the source sequence also receives position codes.
    pub source_positional: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.depth == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("fusion sizes must all be at least 1".into()));
        }
        if self.kernel_width == 0 {
            return Err(Error::Config("conv kernel width must be positive".into()));
        }
        if self.d_h % 2 != 0 {
            return Err(Error::Config(format!("d_h = {} must be even", self.d_h)));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_h = {} is not divisible by {} heads",
                self.d_h, self.heads
            )));
        }
        Ok(())
    }

    /// Feature dimension of every fused sequence.
    pub fn fused_dim(&self) -> usize {
        2 * self.d_h
    }
}

/// Learnable affine part of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert_filled(format!("{prefix}.gain"), &[d], 1.0)?,
            bias: store.insert_filled(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }

    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 0)?;
        let g = tape.mul_gain(n, tape.param(self.gain))?;
        tape.add_bias(g, tape.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm_target: NormParams,
    pub norm_source: NormParams,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_ffn: NormParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

fn linear<R: Rng>(
    store: &mut ParamStore,
    name: String,
    out: usize,
    inp: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.insert_normal(name, &[out, inp], (1.0 / inp as f64).sqrt(), rng)
}

impl BlockParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_h;
        let h = cfg.ffn_hidden;
        Ok(Self {
            norm_target: NormParams::register(store, &format!("{prefix}.norm_target"), d)?,
            norm_source: NormParams::register(store, &format!("{prefix}.norm_source"), d)?,
            wq: linear(store, format!("{prefix}.wq"), d, d, rng)?,
            wk: linear(store, format!("{prefix}.wk"), d, d, rng)?,
            wv: linear(store, format!("{prefix}.wv"), d, d, rng)?,
            wo: linear(store, format!("{prefix}.wo"), d, d, rng)?,
            norm_ffn: NormParams::register(store, &format!("{prefix}.norm_ffn"), d)?,
            ffn_w1: linear(store, format!("{prefix}.ffn_w1"), h, d, rng)?,
            ffn_b1: store.insert_filled(format!("{prefix}.ffn_b1"), &[h], 0.0)?,
            ffn_w2: linear(store, format!("{prefix}.ffn_w2"), d, h, rng)?,
            ffn_b2: store.insert_filled(format!("{prefix}.ffn_b2"), &[d], 0.0)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    /// Conv kernels `[d_h × d^m × width]`.
    pub proj_target: ParamId,
    pub proj_source: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl TransformerParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_target: usize,
        d_source: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let w = cfg.kernel_width;
        let proj_target = store.insert_normal(
            format!("{prefix}.proj_target"),
            &[cfg.d_h, d_target, w],
            (1.0 / (d_target * w) as f64).sqrt(),
            rng,
        )?;
        let proj_source = store.insert_normal(
            format!("{prefix}.proj_source"),
            &[cfg.d_h, d_source, w],
            (1.0 / (d_source * w) as f64).sqrt(),
            rng,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::register(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            proj_target,
            proj_source,
            blocks,
        })
    }
}

/// Parameters of all six cross-modal transformers, indexed by target
/// modality and then by position in [`Modality::sources`].
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub branches: [[TransformerParams; 2]; 3],
}

impl FusionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        dims: [usize; 3],
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut branch = |target: Modality, source: Modality| {
            TransformerParams::register(
                store,
                &format!("fuse.{}2{}", source.tag(), target.tag()),
                dims[target.index()],
                dims[source.index()],
                cfg,
                rng,
            )
        };
        let mut make = |target: Modality| -> Result<[TransformerParams; 2]> {
            let [s0, s1] = target.sources();
            Ok([branch(target, s0)?, branch(target, s1)?])
        };
        Ok(Self {
            branches: [
                make(Modality::Text)?,
                make(Modality::Audio)?,
                make(Modality::Vision)?,
            ],
        })
    }

    pub fn branch(&self, target: Modality, source: Modality) -> Option<&TransformerParams> {
        let pos = target.sources().iter().position(|&s| s == source)?;
        Some(&self.branches[target.index()][pos])
    }
}

/// Sinusoidal position codes as a `d × t` table: row `2j` holds
/// `sin(i / 10000^(2j/d))` and row `2j+1` the matching cosine, for
/// positions `i = 0..t`.
pub fn positional_table(d: usize, t: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs an even dimension, got {d}"
        )));
    }
    let mut data = vec![0.0; d * t];
    for j in 0..d / 2 {
        let freq = 10000f64.powf(-((2 * j) as f64) / d as f64);
        for i in 0..t {
            let angle = i as f64 * freq;
            data[2 * j * t + i] = angle.sin();
            data[(2 * j + 1) * t + i] = angle.cos();
        }
    }
    Tensor::new(&[d, t], data)
}

pub fn positional_embed(tape: &Tape, h: Var) -> Result<Var> {
    let shape = tape.shape(h);
    let [d, t] = shape[..] else {
        return Err(Error::Shape(format!("expected d × T, got {shape:?}")));
    };
    let pe = tape.constant(positional_table(d, t)?);
    tape.add(h, pe)
}

pub struct BlockOutput {
    pub out: Var,
    /// Per-head attention matrices `[T_target × T_source]`; rows sum to 1.
    pub attention: Vec<Var>,
}

/// One cross-modal attention block. `target` is the current target state
/// (`d_h × T^β`) and `source` the layer-0 source encoding (`d_h × T^α`).
pub fn crossmodal_block(
    tape: &Tape,
    p: &BlockParams,
    target: Var,
    source: Var,
    heads: usize,
) -> Result<BlockOutput> {
    let d = tape.shape(target)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if tape.shape(source)[0] != d {
        return Err(Error::Shape(format!(
            "target width {d} but source width {}",
            tape.shape(source)[0]
        )));
    }
    let dk = d / heads;
    let tn = p.norm_target.apply(tape, target)?;
    let sn = p.norm_source.apply(tape, source)?;
    let q = tape.matmul(tape.param(p.wq), tn)?;
    let k = tape.matmul(tape.param(p.wk), sn)?;
    let v = tape.matmul(tape.param(p.wv), sn)?;

    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_out = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 0, h * dk, dk)?;
        let kh = tape.narrow(k, 0, h * dk, dk)?;
        let vh = tape.narrow(v, 0, h * dk, dk)?;
        let scores = tape.matmul(tape.transpose(qh)?, kh)?;
        let a = tape.softmax(tape.scale(scores, scale), 1)?;
        head_out.push(tape.matmul(vh, tape.transpose(a)?)?);
        attention.push(a);
    }
    let merged = if heads == 1 {
        head_out[0]
    } else {
        tape.concat(&head_out, 0)?
    };
    let attended = tape.matmul(tape.param(p.wo), merged)?;
    let resid = tape.add(attended, tn)?;

    let zn = p.norm_ffn.apply(tape, resid)?;
    let hidden = tape.matmul(tape.param(p.ffn_w1), zn)?;
    let hidden = tape.relu(tape.add_bias(hidden, tape.param(p.ffn_b1))?);
    let ffn = tape.matmul(tape.param(p.ffn_w2), hidden)?;
    let ffn = tape.add_bias(ffn, tape.param(p.ffn_b2))?;
    let out = tape.add(ffn, zn)?;
    Ok(BlockOutput { out, attention })
}

/// Projected, position-coded layer-0 encodings `(target, source)`.
pub fn encode_inputs(
    tape: &Tape,
    p: &TransformerParams,
    target_raw: Var,
    source_raw: Var,
    cfg: &FusionConfig,
) -> Result<(Var, Var)> {
    let t = tape.conv1d(target_raw, tape.param(p.proj_target))?;
    let s = tape.conv1d(source_raw, tape.param(p.proj_source))?;
    let t = positional_embed(tape, t)?;
    let s = if cfg.source_positional {
        positional_embed(tape, s)?
    } else {
        s
    };
    Ok((t, s))
}

/// Cross-modal transformer translating `source_raw` into the timeline of
/// `target_raw`; output is `d_h × T^target`.
pub fn crossmodal_transformer(
    tape: &Tape,
    p: &TransformerParams,
    target_raw: Var,
    source_raw: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    if p.blocks.is_empty() {
        return Err(Error::InvalidArgument("transformer depth must be at least 1".into()));
    }
    let (mut z, source) = encode_inputs(tape, p, target_raw, source_raw, cfg)?;
    for block in &p.blocks {
        z = crossmodal_block(tape, block, z, source, cfg.heads)?.out;
    }
    Ok(z)
}

/// A fused sequence `Z^m` of shape `2·d_h × T^m`.
#[derive(Clone, Copy, Debug)]
pub struct FusedSequence {
    pub modality: Modality,
    pub z: Var,
}

/// Produces `Z^t, Z^a, Z^v` from the raw sequences (indexed by modality).
pub fn fuse_modalities(
    tape: &Tape,
    params: &FusionParams,
    raw: [Var; 3],
    cfg: &FusionConfig,
) -> Result<[FusedSequence; 3]> {
    let fuse = |target: Modality| -> Result<FusedSequence> {
        let [s0, s1] = target.sources();
        let branches = &params.branches[target.index()];
        let x = raw[target.index()];
        let a = crossmodal_transformer(tape, &branches[0], x, raw[s0.index()], cfg)?;
        let b = crossmodal_transformer(tape, &branches[1], x, raw[s1.index()], cfg)?;
        Ok(FusedSequence {
            modality: target,
            z: tape.concat(&[a, b], 0)?,
        })
    };
    Ok([
        fuse(Modality::Text)?,
        fuse(Modality::Audio)?,
        fuse(Modality::Vision)?,
    ])
}
