//! Transformer encoder building blocks: signal embedding with sinusoidal
//! positional encoding, multi-head self-attention and the pre-norm residual
//! block `y = MSA(LN(x)) + x`, `out = MLP(LN(y)) + y`.
//!
//! Parameter structs hold plain [`Tensor`] values; to run them through a
//! [`Graph`] they are first registered with `insert`, which returns a
//! mirror struct of node ids. That split lets one graph reuse the same
//! parameters for every window in a batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Epsilon used by every layer norm in the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Number of input signal channels.
pub const CHANNELS: usize = 8;

/// Glorot-style uniform init: limit = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(vec![rows, cols], data)
        .unwrap()
        .with_grad()
}

pub(crate) fn zeros_vec(d: usize) -> Tensor {
    Tensor::vector(vec![0.0; d]).with_grad()
}

pub(crate) fn ones_vec(d: usize) -> Tensor {
    Tensor::vector(vec![1.0; d]).with_grad()
}

/// Sinusoidal positional encoding table of shape `[len, d_model]`:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_vec(vec![len, d_model], data).unwrap()
}

/// Per-timestep affine map from the 8 signal channels into model space.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    /// `[8, d_model]`
    pub projection: Tensor,
    /// `[d_model]`
    pub bias: Tensor,
}

pub struct EmbeddingIds {
    pub projection: NodeId,
    pub bias: NodeId,
}

impl EmbeddingParams {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize) -> Self {
        EmbeddingParams {
            projection: glorot(rng, CHANNELS, d_model),
            bias: zeros_vec(d_model),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> EmbeddingIds {
        EmbeddingIds {
            projection: g.insert(&self.projection),
            bias: g.insert(&self.bias),
        }
    }

    pub fn d_model(&self) -> usize {
        self.projection.shape()[1]
    }
}

/// `signal[L, 8] -> tokens[L, d_model]`: affine projection plus the
/// sinusoidal positional table.
pub fn embed_and_encode(g: &mut Graph, signal: NodeId, ids: &EmbeddingIds) -> Result<NodeId> {
    let s = g.shape(signal).to_vec();
    if s.len() != 2 || s[1] != CHANNELS {
        return Err(Error::Dim(format!(
            "embed_and_encode expects [L, {CHANNELS}], got {s:?}"
        )));
    }
    let d_model = g.shape(ids.projection)[1];
    let l = s[0];
    let proj = g.matmul(signal, ids.projection)?;
    let bias = g.repeat_rows(ids.bias, l)?;
    let with_bias = g.add(proj, bias)?;
    let pe = g.constant(positional_encoding(l, d_model));
    g.add(with_bias, pe)
}

/// Query/key/value projections for one attention head, each `[d_model, d_head]`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `[heads * d_head, d_model]`
    pub output: Tensor,
}

pub struct HeadIds {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

pub struct AttentionIds {
    pub heads: Vec<HeadIds>,
    pub output: NodeId,
}

impl AttentionParams {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                wq: glorot(rng, d_model, d_head),
                wk: glorot(rng, d_model, d_head),
                wv: glorot(rng, d_model, d_head),
            })
            .collect();
        Ok(AttentionParams {
            heads,
            output: glorot(rng, d_model, d_model),
        })
    }

    pub fn insert(&self, g: &mut Graph) -> AttentionIds {
        AttentionIds {
            heads: self
                .heads
                .iter()
                .map(|h| HeadIds {
                    wq: g.insert(&h.wq),
                    wk: g.insert(&h.wk),
                    wv: g.insert(&h.wv),
                })
                .collect(),
            output: g.insert(&self.output),
        }
    }

    pub fn d_model(&self) -> usize {
        self.output.shape()[1]
    }
}

/// Attention output plus the per-head weight nodes, for tests that inspect
/// the softmax rows.
pub struct MsaTrace {
    pub output: NodeId,
    pub head_weights: Vec<NodeId>,
}

pub fn multi_head_self_attention_traced(
    g: &mut Graph,
    tokens: NodeId,
    ids: &AttentionIds,
) -> Result<MsaTrace> {
    let s = g.shape(tokens).to_vec();
    let d_model = g.shape(ids.output)[1];
    if s.len() != 2 || s[1] != d_model {
        return Err(Error::Dim(format!(
            "attention expects tokens [L, {d_model}], got {s:?}"
        )));
    }
    let d_head = g.shape(ids.heads[0].wq)[1];
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let mut contexts = Vec::with_capacity(ids.heads.len());
    let mut head_weights = Vec::with_capacity(ids.heads.len());
    for h in &ids.heads {
        let q = g.matmul(tokens, h.wq)?;
        let k = g.matmul(tokens, h.wk)?;
        let v = g.matmul(tokens, h.wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, inv_sqrt);
        let weights = g.softmax(scaled, 1)?;
        contexts.push(g.matmul(weights, v)?);
        head_weights.push(weights);
    }
    let merged = g.concat_last(&contexts)?;
    let output = g.matmul(merged, ids.output)?;
    Ok(MsaTrace {
        output,
        head_weights,
    })
}

/// Bidirectional scaled-dot-product attention over all heads; shape
/// preserving `[L, d_model] -> [L, d_model]`.
pub fn multi_head_self_attention(
    g: &mut Graph,
    tokens: NodeId,
    ids: &AttentionIds,
) -> Result<NodeId> {
    Ok(multi_head_self_attention_traced(g, tokens, ids)?.output)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct LayerNormIds {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: ones_vec(d),
            beta: zeros_vec(d),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> LayerNormIds {
        LayerNormIds {
            gamma: g.insert(&self.gamma),
            beta: g.insert(&self.beta),
        }
    }
}

/// Two affine layers with a ReLU between: d_model -> d_ff -> d_model.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct MlpIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MlpParams {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, d_ff: usize) -> Self {
        MlpParams {
            w1: glorot(rng, d_model, d_ff),
            b1: zeros_vec(d_ff),
            w2: glorot(rng, d_ff, d_model),
            b2: zeros_vec(d_model),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> MlpIds {
        MlpIds {
            w1: g.insert(&self.w1),
            b1: g.insert(&self.b1),
            w2: g.insert(&self.w2),
            b2: g.insert(&self.b2),
        }
    }
}

/// One encoder block: attention and MLP sublayers, each pre-normed with an
/// additive residual.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

pub struct BlockIds {
    pub ln1: LayerNormIds,
    pub attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub mlp: MlpIds,
}

impl BlockParams {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Ok(BlockParams {
            ln1: LayerNormParams::init(d_model),
            attn: AttentionParams::init(rng, d_model, n_heads)?,
            ln2: LayerNormParams::init(d_model),
            mlp: MlpParams::init(rng, d_model, d_ff),
        })
    }

    pub fn insert(&self, g: &mut Graph) -> BlockIds {
        BlockIds {
            ln1: self.ln1.insert(g),
            attn: self.attn.insert(g),
            ln2: self.ln2.insert(g),
            mlp: self.mlp.insert(g),
        }
    }
}

pub fn transformer_block(g: &mut Graph, x: NodeId, ids: &BlockIds) -> Result<NodeId> {
    let l = g.shape(x)[0];

    let normed = g.layer_norm(x, ids.ln1.gamma, ids.ln1.beta, LN_EPS)?;
    let attended = multi_head_self_attention(g, normed, &ids.attn)?;
    let y = g.add(attended, x)?;

    let normed2 = g.layer_norm(y, ids.ln2.gamma, ids.ln2.beta, LN_EPS)?;
    let h1 = g.matmul(normed2, ids.mlp.w1)?;
    let b1 = g.repeat_rows(ids.mlp.b1, l)?;
    let h1b = g.add(h1, b1)?;
    let act = g.relu(h1b);
    let h2 = g.matmul(act, ids.mlp.w2)?;
    let b2 = g.repeat_rows(ids.mlp.b2, l)?;
    let mlp_out = g.add(h2, b2)?;
    g.add(mlp_out, y)
}

/// Sequential application of encoder blocks; an empty list is the identity.
pub fn encoder_stack(g: &mut Graph, x: NodeId, blocks: &[BlockIds]) -> Result<NodeId> {
    let mut cur = x;
    for b in blocks {
        cur = transformer_block(g, cur, b)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn token_tensor(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![l, d], data).unwrap()
    }

    #[test]
    fn positional_encoding_at_origin() {
        let pe = positional_encoding(4, 6);
        for i in 0..3 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn zero_signal_and_weights_yield_pure_positional_encoding() {
        let mut g = Graph::new();
        let params = EmbeddingParams {
            projection: Tensor::zeros(vec![8, 6]).with_grad(),
            bias: Tensor::zeros(vec![6]).with_grad(),
        };
        let ids = params.insert(&mut g);
        let signal = g.constant(Tensor::zeros(vec![4, 8]));
        let out = embed_and_encode(&mut g, signal, &ids).unwrap();
        let pe = positional_encoding(4, 6);
        assert_eq!(g.data(out), pe.data());
    }

    #[test]
    fn embedding_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EmbeddingParams::init(&mut rng, 16);
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let signal = g.constant(token_tensor(&mut rng, 4, 8));
        let out = embed_and_encode(&mut g, signal, &ids).unwrap();
        assert_eq!(g.shape(out), &[4, 16]);
    }

    #[test]
    fn embedding_rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EmbeddingParams::init(&mut rng, 16);
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let signal = g.constant(Tensor::zeros(vec![4, 7]));
        assert!(matches!(
            embed_and_encode(&mut g, signal, &ids),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let tokens = g.constant(token_tensor(&mut rng, 1, 4));
        let trace = multi_head_self_attention_traced(&mut g, tokens, &ids).unwrap();
        for &w in &trace.head_weights {
            assert_eq!(g.data(w), &[1.0]);
        }
        // with the weight pinned at 1, the output is v. w_o
        let tok = g.value(tokens).clone();
        let mut check = Graph::new();
        let t = check.insert(&tok);
        let cids = params.insert(&mut check);
        let mut ctxs = Vec::new();
        for h in &cids.heads {
            ctxs.push(check.matmul(t, h.wv).unwrap());
        }
        let merged = check.concat_last(&ctxs).unwrap();
        let expected = check.matmul(merged, cids.output).unwrap();
        for (a, b) in g.data(trace.output).iter().zip(check.data(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_attend_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let tokens = g.constant(Tensor::from_vec(vec![5, 4], data).unwrap());
        let out = multi_head_self_attention(&mut g, tokens, &ids).unwrap();
        let o = g.data(out);
        for r in 1..5 {
            for c in 0..4 {
                assert!((o[r * 4 + c] - o[c]).abs() < 1e-12);
            }
        }
    }

    /// Brute-force attention computed with plain loops on the raw parameter
    /// data, sharing nothing with the graph implementation.
    fn attention_oracle(tokens: &Tensor, params: &AttentionParams) -> Vec<f64> {
        let l = tokens.shape()[0];
        let d = tokens.shape()[1];
        let d_head = params.heads[0].wq.shape()[1];
        let mut merged = vec![0.0; l * params.heads.len() * d_head];
        for (hi, h) in params.heads.iter().enumerate() {
            let project = |w: &Tensor| -> Vec<f64> {
                let mut out = vec![0.0; l * d_head];
                for i in 0..l {
                    for j in 0..d_head {
                        for p in 0..d {
                            out[i * d_head + j] +=
                                tokens.data()[i * d + p] * w.data()[p * d_head + j];
                        }
                    }
                }
                out
            };
            let (q, k, v) = (project(&h.wq), project(&h.wk), project(&h.wv));
            for i in 0..l {
                let mut scores = vec![0.0; l];
                for j in 0..l {
                    for p in 0..d_head {
                        scores[j] += q[i * d_head + p] * k[j * d_head + p];
                    }
                    scores[j] /= (d_head as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for p in 0..d_head {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += exps[j] / z * v[j * d_head + p];
                    }
                    merged[i * params.heads.len() * d_head + hi * d_head + p] = acc;
                }
            }
        }
        let hd = params.heads.len() * d_head;
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..d {
                for p in 0..hd {
                    out[i * d + j] += merged[i * hd + p] * params.output.data()[p * d + j];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let tokens = token_tensor(&mut rng, 3, 4);
        let expected = attention_oracle(&tokens, &params);

        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let t = g.constant(tokens);
        let out = multi_head_self_attention(&mut g, t, &ids).unwrap();
        for (a, b) in g.data(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = AttentionParams::init(&mut rng, 8, 2).unwrap();
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let tokens = g.constant(token_tensor(&mut rng, 6, 8));
        let trace = multi_head_self_attention_traced(&mut g, tokens, &ids).unwrap();
        for &w in &trace.head_weights {
            for r in 0..6 {
                let sum: f64 = g.data(w)[r * 6..(r + 1) * 6].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let tokens = token_tensor(&mut rng, 5, 4);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = vec![0.0; 20];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 4..(dst + 1) * 4]
                .copy_from_slice(&tokens.data()[src * 4..(src + 1) * 4]);
        }

        let mut g1 = Graph::new();
        let ids1 = params.insert(&mut g1);
        let t1 = g1.constant(tokens);
        let o1 = multi_head_self_attention(&mut g1, t1, &ids1).unwrap();

        let mut g2 = Graph::new();
        let ids2 = params.insert(&mut g2);
        let t2 = g2.constant(Tensor::from_vec(vec![5, 4], permuted).unwrap());
        let o2 = multi_head_self_attention(&mut g2, t2, &ids2).unwrap();

        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                let a = g1.data(o1)[src * 4 + c];
                let b = g2.data(o2)[dst * 4 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_d_model_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = AttentionParams::init(&mut rng, 4, 2).unwrap();
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let tokens = g.constant(Tensor::zeros(vec![3, 6]));
        assert!(matches!(
            multi_head_self_attention(&mut g, tokens, &ids),
            Err(Error::Dim(_))
        ));
    }

    fn zeroed_block(rng: &mut ChaCha8Rng, d: usize, heads: usize, d_ff: usize) -> BlockParams {
        let mut b = BlockParams::init(rng, d, heads, d_ff).unwrap();
        b.attn.output = Tensor::zeros(vec![d, d]).with_grad();
        b.mlp.w1 = Tensor::zeros(vec![d, d_ff]).with_grad();
        b.mlp.b1 = Tensor::zeros(vec![d_ff]).with_grad();
        b.mlp.w2 = Tensor::zeros(vec![d_ff, d]).with_grad();
        b.mlp.b2 = Tensor::zeros(vec![d]).with_grad();
        b
    }

    #[test]
    fn block_with_zero_projections_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = zeroed_block(&mut rng, 4, 2, 8);
        let tokens = token_tensor(&mut rng, 5, 4);
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let t = g.constant(tokens.clone());
        let out = transformer_block(&mut g, t, &ids).unwrap();
        for (a, b) in g.data(out).iter().zip(tokens.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_with_zero_mlp_returns_post_attention_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = BlockParams::init(&mut rng, 4, 2, 8).unwrap();
        params.mlp.w1 = Tensor::zeros(vec![4, 8]).with_grad();
        params.mlp.w2 = Tensor::zeros(vec![8, 4]).with_grad();
        let tokens = token_tensor(&mut rng, 5, 4);

        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let t = g.constant(tokens.clone());
        let out = transformer_block(&mut g, t, &ids).unwrap();

        let mut g2 = Graph::new();
        let ids2 = params.insert(&mut g2);
        let t2 = g2.constant(tokens);
        let normed = g2
            .layer_norm(t2, ids2.ln1.gamma, ids2.ln1.beta, LN_EPS)
            .unwrap();
        let attended = multi_head_self_attention(&mut g2, normed, &ids2.attn).unwrap();
        let y = g2.add(attended, t2).unwrap();

        for (a, b) in g.data(out).iter().zip(g2.data(y)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = BlockParams::init(&mut rng, 16, 2, 32).unwrap();
        let mut g = Graph::new();
        let ids = params.insert(&mut g);
        let t = g.constant(token_tensor(&mut rng, 8, 16));
        let out = transformer_block(&mut g, t, &ids).unwrap();
        assert_eq!(g.shape(out), &[8, 16]);
    }

    #[test]
    fn empty_stack_is_identity_and_two_blocks_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b1 = BlockParams::init(&mut rng, 4, 2, 8).unwrap();
        let b2 = BlockParams::init(&mut rng, 4, 2, 8).unwrap();
        let tokens = token_tensor(&mut rng, 4, 4);

        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let out = encoder_stack(&mut g, t, &[]).unwrap();
        assert_eq!(g.data(out), tokens.data());

        let mut gs = Graph::new();
        let ids = [b1.insert(&mut gs), b2.insert(&mut gs)];
        let ts = gs.constant(tokens.clone());
        let stacked = encoder_stack(&mut gs, ts, &ids).unwrap();

        let mut gm = Graph::new();
        let i1 = b1.insert(&mut gm);
        let i2 = b2.insert(&mut gm);
        let tm = gm.constant(tokens);
        let step1 = transformer_block(&mut gm, tm, &i1).unwrap();
        let step2 = transformer_block(&mut gm, step1, &i2).unwrap();

        assert_eq!(gs.data(stacked), gm.data(step2));
    }

    #[test]
    fn four_block_stack_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks: Vec<BlockParams> = (0..4)
            .map(|_| BlockParams::init(&mut rng, 32, 4, 64).unwrap())
            .collect();
        let mut g = Graph::new();
        let ids: Vec<BlockIds> = blocks.iter().map(|b| b.insert(&mut g)).collect();
        let t = g.constant(token_tensor(&mut rng, 16, 32));
        let out = encoder_stack(&mut g, t, &ids).unwrap();
        assert_eq!(g.shape(out), &[16, 32]);
    }

    /// Central-difference check over every parameter of a block stack.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 16;
        let blocks: Vec<BlockParams> = (0..2)
            .map(|_| BlockParams::init(&mut rng, d, 2, 2 * d).unwrap())
            .collect();
        let tokens = token_tensor(&mut rng, 8, d);
        let target: Vec<f64> = (0..8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |blocks: &[BlockParams]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<BlockIds> = blocks.iter().map(|b| b.insert(&mut g)).collect();
            let t = g.constant(tokens.clone());
            let out = encoder_stack(&mut g, t, &ids).unwrap();
            let tgt = g.constant(Tensor::from_vec(vec![8, d], target.clone()).unwrap());
            let diff = g.sub(out, tgt).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.mean(sq);
            g.data(loss)[0]
        };

        // analytic gradients
        let mut g = Graph::new();
        let ids: Vec<BlockIds> = blocks.iter().map(|b| b.insert(&mut g)).collect();
        let t = g.constant(tokens.clone());
        let out = encoder_stack(&mut g, t, &ids).unwrap();
        let tgt = g.constant(Tensor::from_vec(vec![8, d], target.clone()).unwrap());
        let diff = g.sub(out, tgt).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        // touch a few entries of each tensor in the first block plus the outputs
        let probes: Vec<(usize, NodeId)> = vec![
            (0, ids[0].ln1.gamma),
            (0, ids[0].attn.heads[0].wq),
            (0, ids[0].attn.heads[1].wv),
            (0, ids[0].attn.output),
            (0, ids[0].mlp.w1),
            (0, ids[0].mlp.b2),
            (1, ids[1].attn.heads[0].wk),
            (1, ids[1].mlp.w2),
            (1, ids[1].ln2.beta),
        ];
        for (bi, node) in probes {
            let analytic = grads.get(node).unwrap();
            for e in [0usize, analytic.len() / 2, analytic.len() - 1] {
                let mut plus = blocks.clone();
                let mut minus = blocks.clone();
                perturb(&mut plus[bi], node, &ids[bi], e, eps);
                perturb(&mut minus[bi], node, &ids[bi], e, -eps);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = analytic[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    fn perturb(block: &mut BlockParams, node: NodeId, ids: &BlockIds, entry: usize, delta: f64) {
        let t: &mut Tensor = if node == ids.ln1.gamma {
            &mut block.ln1.gamma
        } else if node == ids.attn.heads[0].wq {
            &mut block.attn.heads[0].wq
        } else if node == ids.attn.heads[1].wv {
            &mut block.attn.heads[1].wv
        } else if node == ids.attn.output {
            &mut block.attn.output
        } else if node == ids.mlp.w1 {
            &mut block.mlp.w1
        } else if node == ids.mlp.b2 {
            &mut block.mlp.b2
        } else if node == ids.attn.heads[0].wk {
            &mut block.attn.heads[0].wk
        } else if node == ids.mlp.w2 {
            &mut block.mlp.w2
        } else if node == ids.ln2.beta {
            &mut block.ln2.beta
        } else {
            panic!("unknown probe node");
        };
        t.data_mut()[entry] += delta;
    }
}
