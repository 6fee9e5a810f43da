//! The full regression architecture: a three-level average-pooling pyramid
//! over the raw 8-channel window, a transformer encoder and a frozen random
//! Fourier encoder per level, concatenation fusion, and a fully-connected
//! head emitting the (valence, arousal) pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{encode_sequence, sample_projection, GaussianProjection};
use crate::nn::{
    embed_and_encode, encoder_stack, glorot, zeros_vec, BlockIds, BlockParams, EmbeddingIds,
    EmbeddingParams, CHANNELS,
};
use crate::tensor::{avg_pool1d_value, Graph, NodeId, Tensor};

/// Lower and upper bound of the affect scale.
pub const SCORE_MIN: f64 = 0.5;
pub const SCORE_MAX: f64 = 9.5;

/// Pyramid division factors; level 0 is the raw window.
pub const SCALES: [usize; 3] = [1, 2, 4];

/// Every architectural hyperparameter. `paper` is the full-size
/// configuration; `desk` is small enough for gradient checks and test
/// training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_gauss_features: usize,
    pub gauss_sigma: f64,
    pub scales: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            seq_len: 2048,
            d_model: 1024,
            n_layers: 4,
            n_heads: 4,
            d_ff: 4096,
            n_gauss_features: 1024,
            gauss_sigma: 1.0,
            scales: SCALES.to_vec(),
            head_widths: vec![256, 64],
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            seq_len: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            n_gauss_features: 8,
            gauss_sigma: 1.0,
            scales: SCALES.to_vec(),
            head_widths: vec![256, 64],
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Param(format!(
                "unknown preset '{other}' (expected paper or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales != SCALES {
            return Err(Error::Param(format!(
                "scales must be {SCALES:?}, got {:?}",
                self.scales
            )));
        }
        if self.seq_len == 0 || self.seq_len % 4 != 0 {
            return Err(Error::Param(format!(
                "seq_len must be a positive multiple of 4, got {}",
                self.seq_len
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_gauss_features == 0 {
            return Err(Error::Param("model dimensions must be positive".into()));
        }
        if self.gauss_sigma <= 0.0 {
            return Err(Error::Param(format!(
                "gauss_sigma must be positive, got {}",
                self.gauss_sigma
            )));
        }
        Ok(())
    }

    /// Width of the fused feature vector: three branches of
    /// `d_model + n_gauss_features` each.
    pub fn fused_len(&self) -> usize {
        self.scales.len() * (self.d_model + self.n_gauss_features)
    }
}

/// Clamped affect scores produced at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub valence: f64,
    pub arousal: f64,
}

pub fn clamp_score(v: f64) -> f64 {
    v.clamp(SCORE_MIN, SCORE_MAX)
}

/// One affine head layer.
#[derive(Debug, Clone)]
pub struct Affine {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

pub struct AffineIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Affine {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Affine {
            weight: glorot(rng, d_in, d_out),
            bias: zeros_vec(d_out),
        }
    }

    fn insert(&self, g: &mut Graph) -> AffineIds {
        AffineIds {
            weight: g.insert(&self.weight),
            bias: g.insert(&self.bias),
        }
    }
}

/// Parameters for one pyramid level: its own embedding, encoder blocks and
/// frozen random-feature projection (no weight sharing across levels).
#[derive(Debug, Clone)]
pub struct ScaleBranch {
    pub embed: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub gauss: GaussianProjection,
}

pub struct ScaleIds {
    pub embed: EmbeddingIds,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub scales: Vec<ScaleBranch>,
    pub head: Vec<Affine>,
}

pub struct ModelIds {
    pub scales: Vec<ScaleIds>,
    pub head: Vec<AffineIds>,
}

impl ModelParams {
    /// Seeded initialization: Glorot-uniform weights, zero biases, unit
    /// layer-norm gains, and one frozen projection per scale.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut scales = Vec::with_capacity(config.scales.len());
        for _ in &config.scales {
            let embed = EmbeddingParams::init(&mut rng, config.d_model);
            let blocks = (0..config.n_layers)
                .map(|_| BlockParams::init(&mut rng, config.d_model, config.n_heads, config.d_ff))
                .collect::<Result<Vec<_>>>()?;
            let gauss_seed = rng.gen::<u64>();
            let gauss = sample_projection(
                gauss_seed,
                CHANNELS,
                config.n_gauss_features,
                config.gauss_sigma,
            )?;
            scales.push(ScaleBranch {
                embed,
                blocks,
                gauss,
            });
        }
        let mut head = Vec::new();
        let mut width = config.fused_len();
        for &h in &config.head_widths {
            head.push(Affine::init(&mut rng, width, h));
            width = h;
        }
        head.push(Affine::init(&mut rng, width, 2));
        Ok(ModelParams { scales, head })
    }

    pub fn insert(&self, g: &mut Graph) -> ModelIds {
        ModelIds {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleIds {
                    embed: s.embed.insert(g),
                    blocks: s.blocks.iter().map(|b| b.insert(g)).collect(),
                })
                .collect(),
            head: self.head.iter().map(|a| a.insert(g)).collect(),
        }
    }

    /// Trainable tensors in a fixed, documented order. The optimizer, the
    /// gradient checker and the checkpoint writer all rely on this order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (si, s) in self.scales.iter().enumerate() {
            out.push((format!("scale{si}.embed.projection"), &s.embed.projection));
            out.push((format!("scale{si}.embed.bias"), &s.embed.bias));
            for (bi, b) in s.blocks.iter().enumerate() {
                out.push((format!("scale{si}.block{bi}.ln1.gamma"), &b.ln1.gamma));
                out.push((format!("scale{si}.block{bi}.ln1.beta"), &b.ln1.beta));
                for (hi, h) in b.attn.heads.iter().enumerate() {
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wq"), &h.wq));
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wk"), &h.wk));
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wv"), &h.wv));
                }
                out.push((format!("scale{si}.block{bi}.attn.output"), &b.attn.output));
                out.push((format!("scale{si}.block{bi}.ln2.gamma"), &b.ln2.gamma));
                out.push((format!("scale{si}.block{bi}.ln2.beta"), &b.ln2.beta));
                out.push((format!("scale{si}.block{bi}.mlp.w1"), &b.mlp.w1));
                out.push((format!("scale{si}.block{bi}.mlp.b1"), &b.mlp.b1));
                out.push((format!("scale{si}.block{bi}.mlp.w2"), &b.mlp.w2));
                out.push((format!("scale{si}.block{bi}.mlp.b2"), &b.mlp.b2));
            }
        }
        for (li, a) in self.head.iter().enumerate() {
            out.push((format!("head.fc{li}.weight"), &a.weight));
            out.push((format!("head.fc{li}.bias"), &a.bias));
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (si, s) in self.scales.iter_mut().enumerate() {
            out.push((
                format!("scale{si}.embed.projection"),
                &mut s.embed.projection,
            ));
            out.push((format!("scale{si}.embed.bias"), &mut s.embed.bias));
            for (bi, b) in s.blocks.iter_mut().enumerate() {
                out.push((format!("scale{si}.block{bi}.ln1.gamma"), &mut b.ln1.gamma));
                out.push((format!("scale{si}.block{bi}.ln1.beta"), &mut b.ln1.beta));
                for (hi, h) in b.attn.heads.iter_mut().enumerate() {
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wq"), &mut h.wq));
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wk"), &mut h.wk));
                    out.push((format!("scale{si}.block{bi}.attn.head{hi}.wv"), &mut h.wv));
                }
                out.push((
                    format!("scale{si}.block{bi}.attn.output"),
                    &mut b.attn.output,
                ));
                out.push((format!("scale{si}.block{bi}.ln2.gamma"), &mut b.ln2.gamma));
                out.push((format!("scale{si}.block{bi}.ln2.beta"), &mut b.ln2.beta));
                out.push((format!("scale{si}.block{bi}.mlp.w1"), &mut b.mlp.w1));
                out.push((format!("scale{si}.block{bi}.mlp.b1"), &mut b.mlp.b1));
                out.push((format!("scale{si}.block{bi}.mlp.w2"), &mut b.mlp.w2));
                out.push((format!("scale{si}.block{bi}.mlp.b2"), &mut b.mlp.b2));
            }
        }
        for (li, a) in self.head.iter_mut().enumerate() {
            out.push((format!("head.fc{li}.weight"), &mut a.weight));
            out.push((format!("head.fc{li}.bias"), &mut a.bias));
        }
        out
    }

    /// Frozen arrays (the random-feature projections), for checkpointing.
    pub fn frozen(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (si, s) in self.scales.iter().enumerate() {
            out.push((format!("scale{si}.gauss.weights"), &s.gauss.weights));
            out.push((format!("scale{si}.gauss.offsets"), &s.gauss.offsets));
        }
        out
    }
}

impl ModelIds {
    /// Node ids aligned with [`ModelParams::trainable`].
    pub fn trainable_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for s in &self.scales {
            out.push(s.embed.projection);
            out.push(s.embed.bias);
            for b in &s.blocks {
                out.push(b.ln1.gamma);
                out.push(b.ln1.beta);
                for h in &b.attn.heads {
                    out.push(h.wq);
                    out.push(h.wk);
                    out.push(h.wv);
                }
                out.push(b.attn.output);
                out.push(b.ln2.gamma);
                out.push(b.ln2.beta);
                out.push(b.mlp.w1);
                out.push(b.mlp.b1);
                out.push(b.mlp.w2);
                out.push(b.mlp.b2);
            }
        }
        for a in &self.head {
            out.push(a.weight);
            out.push(a.bias);
        }
        out
    }
}

/// Pools the raw window into its three pyramid levels:
/// the input itself, a stride-2 mean, and a stride-4 mean of the original.
pub fn build_pyramid(signal: &Tensor) -> Result<[Tensor; 3]> {
    let s = signal.shape();
    if s.len() != 2 || s[1] != CHANNELS {
        return Err(Error::Dim(format!(
            "build_pyramid expects [L, {CHANNELS}], got {s:?}"
        )));
    }
    if s[0] % 4 != 0 {
        return Err(Error::Input(format!(
            "signal length {} is not divisible by 4",
            s[0]
        )));
    }
    let half = avg_pool1d_value(signal, 2, 2)?;
    let quarter = avg_pool1d_value(signal, 4, 4)?;
    Ok([signal.clone(), half, quarter])
}

/// `v[f] -> v.W + b` with a reshape round trip through `[1, f]` so the
/// strict 2-D matmul applies.
fn affine_vec(g: &mut Graph, v: NodeId, ids: &AffineIds) -> Result<NodeId> {
    let f = g.shape(v)[0];
    let out = g.shape(ids.weight)[1];
    let row = g.reshape(v, vec![1, f])?;
    let mm = g.matmul(row, ids.weight)?;
    let flat = g.reshape(mm, vec![out])?;
    g.add(flat, ids.bias)
}

/// Dual encoding of one pyramid level: temporal mean of the transformer
/// tokens concatenated with the random-feature summary. Output length is
/// `d_model + n_gauss_features`.
pub fn encode_scale(
    g: &mut Graph,
    scaled_signal: &Tensor,
    ids: &ScaleIds,
    gauss: &GaussianProjection,
) -> Result<NodeId> {
    let signal = g.constant(scaled_signal.clone());
    let tokens = embed_and_encode(g, signal, &ids.embed)?;
    let encoded = encoder_stack(g, tokens, &ids.blocks)?;
    let summary = g.mean_rows(encoded)?;
    let features = g.constant(encode_sequence(scaled_signal, gauss)?);
    g.concat_last(&[summary, features])
}

pub struct ForwardTrace {
    /// `[2]` raw (unclamped) output.
    pub raw: NodeId,
    /// `[3 * (d_model + n_gauss_features)]` fused feature vector.
    pub fused: NodeId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    pub fn insert_params(&self, g: &mut Graph) -> ModelIds {
        self.params.insert(g)
    }

    /// Builds the forward graph for one window against already-inserted
    /// parameters; used directly by the training loop to batch windows.
    pub fn forward_with(&self, g: &mut Graph, ids: &ModelIds, signal: &Tensor) -> Result<NodeId> {
        Ok(self.forward_traced(g, ids, signal)?.raw)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        ids: &ModelIds,
        signal: &Tensor,
    ) -> Result<ForwardTrace> {
        if signal.shape() != [self.config.seq_len, CHANNELS] {
            return Err(Error::Dim(format!(
                "forward expects [{}, {CHANNELS}], got {:?}",
                self.config.seq_len,
                signal.shape()
            )));
        }
        let pyramid = build_pyramid(signal)?;
        let mut branches = Vec::with_capacity(pyramid.len());
        for (level, scaled) in pyramid.iter().enumerate() {
            branches.push(encode_scale(
                g,
                scaled,
                &ids.scales[level],
                &self.params.scales[level].gauss,
            )?);
        }
        let fused = g.concat_last(&branches)?;
        let mut h = fused;
        let last = ids.head.len() - 1;
        for (li, layer) in ids.head.iter().enumerate() {
            h = affine_vec(g, h, layer)?;
            if li != last {
                h = g.relu(h);
            }
        }
        Ok(ForwardTrace { raw: h, fused })
    }

    /// Raw differentiable output `(valence, arousal)` for one window.
    pub fn forward_raw(&self, signal: &Tensor) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let ids = self.insert_params(&mut g);
        let out = self.forward_with(&mut g, &ids, signal)?;
        let d = g.data(out);
        Ok([d[0], d[1]])
    }

    /// Inference output with both scores clamped into the affect scale.
    pub fn predict(&self, signal: &Tensor) -> Result<Prediction> {
        let raw = self.forward_raw(signal)?;
        Ok(Prediction {
            valence: clamp_score(raw[0]),
            arousal: clamp_score(raw[1]),
        })
    }
}
