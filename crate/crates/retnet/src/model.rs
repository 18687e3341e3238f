//! Full model assembly: embeddings, a stack of pre-norm residual blocks
//! (sequence mixer + feed-forward), and the output head — for both the
//! retention network and a parameter-matched softmax-attention baseline.
//!
//! ```text
//! Y^l     = Mixer(LN(X^l)) + X^l
//! X^(l+1) = FFN(LN(Y^l)) + Y^l        FFN(X) = gelu(X W1) W2
//! ```
//!
//! Parameter allocation is balanced so both architectures put exactly
//! `12 d^2` learnable weights in every block (norm affines aside): retention
//! spends `8 d^2` on the mixer and uses a `2d` feed-forward width, attention
//! spends `4 d^2` on the mixer and uses `4d`. The baseline gets the same
//! rotary position treatment on its queries and keys so comparisons isolate
//! the mixing mechanism.
//!
//! Forward logits can be computed under any paradigm; training uses the
//! parallel and chunkwise tape paths, decoding uses per-step sessions
//! ([`DecodeSession`]): constant-size recurrent states for retention, a
//! growing key/value cache for the baseline.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::msr::{
    effective_gammas, effective_heads, msr_forward, msr_graph, AblationFlags, GammaSchedule,
    MSRLayerParams, MSRParamNodes, MSRState, Paradigm,
};
use crate::ops::{self, Sign};
use crate::retention::NormalizationConfig;
use crate::tensor::{Precision, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    RetNet,
    Transformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::RetNet => "retnet",
            Arch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "retnet" => Ok(Arch::RetNet),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::Config(format!("unknown arch {other:?}"))),
        }
    }
}

/// Everything needed to build and run a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Feed-forward width; `None` means `2 * d_model` for retention and
    /// `4 * d_model` for the baseline (the parameter-parity defaults).
    pub ffn_dim: Option<usize>,
    pub paradigm: Paradigm,
    pub flags: AblationFlags,
    pub gamma_schedule: GammaSchedule,
    pub norm: NormalizationConfig,
    /// Learnable per-feature affine on the retention GroupNorm.
    pub groupnorm_affine: bool,
    /// Share the output head with the input embedding.
    pub tied_embedding: bool,
    /// Residual-branch dropout; 0 disables it (the desk-scale default).
    pub dropout: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    pub fn retnet(layers: usize, d_model: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::RetNet,
            layers,
            d_model,
            heads,
            vocab_size,
            ffn_dim: None,
            paradigm: Paradigm::Parallel,
            flags: AblationFlags::default(),
            gamma_schedule: GammaSchedule::Default,
            norm: NormalizationConfig::default(),
            groupnorm_affine: true,
            tied_embedding: true,
            dropout: 0.0,
            precision: Precision::Fp64,
            seed: 0,
        }
    }

    pub fn transformer(layers: usize, d_model: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig { arch: Arch::Transformer, ..Self::retnet(layers, d_model, heads, vocab_size) }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(match self.arch {
            Arch::RetNet => 2 * self.d_model,
            Arch::Transformer => 4 * self.d_model,
        })
    }

    /// Head count after ablation overrides (retention only).
    pub fn effective_heads(&self) -> Result<usize> {
        match self.arch {
            Arch::RetNet => effective_heads(self.d_model, self.heads, &self.flags),
            Arch::Transformer => Ok(self.heads),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab_size < 3 {
            return Err(Error::Config("d_model and vocab_size must be positive".into()));
        }
        let h = self.effective_heads()?;
        if self.d_model % h != 0 {
            return Err(Error::Config(format!(
                "{h} heads do not divide d_model {}",
                self.d_model
            )));
        }
        if (self.d_model / h) % 2 != 0 {
            return Err(Error::Config(format!(
                "query/key head dim {} must be even for pair rotation",
                self.d_model / h
            )));
        }
        if let Paradigm::Chunkwise(b) = self.paradigm {
            if b < 1 {
                return Err(Error::Config("chunk size must be >= 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Mixer + feed-forward learnable weights per block, norm affines
    /// excluded. Both architectures give `12 d^2` at their default widths.
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let mixer = match self.arch {
            Arch::RetNet => 8 * d * d,
            Arch::Transformer => 4 * d * d,
        };
        mixer + 2 * d * self.ffn_dim()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn ones(d: usize, precision: Precision) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![d], vec![1.0; d], precision).expect("gain"),
            bias: Tensor::zeros(vec![d], precision),
        }
    }
}

/// Baseline multi-head attention weights.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub enum MixerParams {
    Retention(MSRLayerParams),
    Attention(AttnParams),
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub mixer: MixerParams,
    pub norm2: LayerNormParams,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: Tensor, // vocab x d
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    /// Untied output head (vocab x d); `None` when tied to `embed`.
    pub head: Option<Tensor>,
}

impl ModelParams {
    /// Learnable parameter count excluding normalization affines.
    pub fn non_embedding_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let mixer = match &b.mixer {
                    MixerParams::Retention(m) => m.projection_param_count(),
                    MixerParams::Attention(a) => {
                        a.w_q.numel() + a.w_k.numel() + a.w_v.numel() + a.w_o.numel()
                    }
                };
                mixer + b.ffn_w1.numel() + b.ffn_w2.numel()
            })
            .sum()
    }

    /// Trainable tensors in the fixed checkpoint order (decay rates are not
    /// trainable and are excluded). Must stay aligned with
    /// [`ParamNodes::flat`].
    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.norm1.gain);
            out.push(&mut b.norm1.bias);
            match &mut b.mixer {
                MixerParams::Retention(m) => {
                    out.push(&mut m.w_q);
                    out.push(&mut m.w_k);
                    out.push(&mut m.w_v);
                    out.push(&mut m.w_g);
                    out.push(&mut m.w_o);
                    if let Some(g) = &mut m.gn_gain {
                        out.push(g);
                    }
                    if let Some(bn) = &mut m.gn_bias {
                        out.push(bn);
                    }
                }
                MixerParams::Attention(a) => {
                    out.push(&mut a.w_q);
                    out.push(&mut a.w_k);
                    out.push(&mut a.w_v);
                    out.push(&mut a.w_o);
                }
            }
            out.push(&mut b.norm2.gain);
            out.push(&mut b.norm2.bias);
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_w2);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    /// Names matching [`ModelParams::flat_mut`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            out.push(p("norm1.gain"));
            out.push(p("norm1.bias"));
            match &b.mixer {
                MixerParams::Retention(m) => {
                    for s in ["msr.w_q", "msr.w_k", "msr.w_v", "msr.w_g", "msr.w_o"] {
                        out.push(p(s));
                    }
                    if m.gn_gain.is_some() {
                        out.push(p("msr.gn_gain"));
                    }
                    if m.gn_bias.is_some() {
                        out.push(p("msr.gn_bias"));
                    }
                }
                MixerParams::Attention(_) => {
                    for s in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
                        out.push(p(s));
                    }
                }
            }
            out.push(p("norm2.gain"));
            out.push(p("norm2.bias"));
            out.push(p("ffn.w1"));
            out.push(p("ffn.w2"));
        }
        out.push("final_norm.gain".into());
        out.push("final_norm.bias".into());
        if self.head.is_some() {
            out.push("head".into());
        }
        out
    }

    pub fn total_param_count(&self) -> usize {
        let mut n = self.embed.numel() + self.head.as_ref().map_or(0, Tensor::numel);
        n += self.final_norm.gain.numel() + self.final_norm.bias.numel();
        for b in &self.blocks {
            n += b.norm1.gain.numel() * 2 + b.norm2.gain.numel() * 2;
            n += b.ffn_w1.numel() + b.ffn_w2.numel();
            n += match &b.mixer {
                MixerParams::Retention(m) => {
                    m.projection_param_count()
                        + m.gn_gain.as_ref().map_or(0, Tensor::numel)
                        + m.gn_bias.as_ref().map_or(0, Tensor::numel)
                }
                MixerParams::Attention(a) => {
                    a.w_q.numel() + a.w_k.numel() + a.w_v.numel() + a.w_o.numel()
                }
            };
        }
        n
    }
}

/// Deterministic initialization: truncated normal, std 0.02, with
/// output-side projections (the mixer's final matrix and the second
/// feed-forward matrix) shrunk by `1/sqrt(2L)` for depth stability.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let p = config.precision;
    let std = 0.02;
    let out_std = std / (2.0 * config.layers.max(1) as f64).sqrt();

    let embed = rng.trunc_normal_tensor(vec![config.vocab_size, d], std, p);
    let mut blocks = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let mixer = match config.arch {
            Arch::RetNet => {
                let h = config.effective_heads()?;
                let gammas = effective_gammas(h, config.gamma_schedule, &config.flags)?;
                MixerParams::Retention(MSRLayerParams::init(
                    d,
                    gammas,
                    config.groupnorm_affine && !config.flags.no_groupnorm,
                    std,
                    out_std,
                    rng,
                    p,
                )?)
            }
            Arch::Transformer => MixerParams::Attention(AttnParams {
                w_q: rng.trunc_normal_tensor(vec![d, d], std, p),
                w_k: rng.trunc_normal_tensor(vec![d, d], std, p),
                w_v: rng.trunc_normal_tensor(vec![d, d], std, p),
                w_o: rng.trunc_normal_tensor(vec![d, d], out_std, p),
                heads: config.heads,
            }),
        };
        blocks.push(BlockParams {
            norm1: LayerNormParams::ones(d, p),
            mixer,
            norm2: LayerNormParams::ones(d, p),
            ffn_w1: rng.trunc_normal_tensor(vec![d, config.ffn_dim()], std, p),
            ffn_w2: rng.trunc_normal_tensor(vec![config.ffn_dim(), d], out_std, p),
        });
    }
    let head = if config.tied_embedding {
        None
    } else {
        Some(rng.trunc_normal_tensor(vec![config.vocab_size, d], std, p))
    };
    Ok(ModelParams { embed, blocks, final_norm: LayerNormParams::ones(d, p), head })
}

// ── tape path ───────────────────────────────────────────────────────

pub struct AttnParamNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

pub enum MixerNodes {
    Retention(MSRParamNodes),
    Attention(AttnParamNodes),
}

pub struct BlockNodes {
    pub norm1_gain: NodeId,
    pub norm1_bias: NodeId,
    pub mixer: MixerNodes,
    pub norm2_gain: NodeId,
    pub norm2_bias: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_w2: NodeId,
}

pub struct ParamNodes {
    pub embed: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub head: Option<NodeId>,
}

impl ParamNodes {
    pub fn register(g: &mut Graph, params: &ModelParams) -> Self {
        ParamNodes {
            embed: g.param(params.embed.clone()),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    norm1_gain: g.param(b.norm1.gain.clone()),
                    norm1_bias: g.param(b.norm1.bias.clone()),
                    mixer: match &b.mixer {
                        MixerParams::Retention(m) => {
                            MixerNodes::Retention(MSRParamNodes::register(g, m))
                        }
                        MixerParams::Attention(a) => MixerNodes::Attention(AttnParamNodes {
                            w_q: g.param(a.w_q.clone()),
                            w_k: g.param(a.w_k.clone()),
                            w_v: g.param(a.w_v.clone()),
                            w_o: g.param(a.w_o.clone()),
                        }),
                    },
                    norm2_gain: g.param(b.norm2.gain.clone()),
                    norm2_bias: g.param(b.norm2.bias.clone()),
                    ffn_w1: g.param(b.ffn_w1.clone()),
                    ffn_w2: g.param(b.ffn_w2.clone()),
                })
                .collect(),
            final_gain: g.param(params.final_norm.gain.clone()),
            final_bias: g.param(params.final_norm.bias.clone()),
            head: params.head.as_ref().map(|h| g.param(h.clone())),
        }
    }

    /// All trainable node ids, in checkpoint order.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embed];
        for b in &self.blocks {
            ids.push(b.norm1_gain);
            ids.push(b.norm1_bias);
            match &b.mixer {
                MixerNodes::Retention(m) => {
                    ids.extend([m.w_q, m.w_k, m.w_v, m.w_g, m.w_o]);
                    if let Some(g) = m.gn_gain {
                        ids.push(g);
                    }
                    if let Some(bn) = m.gn_bias {
                        ids.push(bn);
                    }
                }
                MixerNodes::Attention(a) => ids.extend([a.w_q, a.w_k, a.w_v, a.w_o]),
            }
            ids.push(b.norm2_gain);
            ids.push(b.norm2_bias);
            ids.push(b.ffn_w1);
            ids.push(b.ffn_w2);
        }
        ids.push(self.final_gain);
        ids.push(self.final_bias);
        if let Some(h) = self.head {
            ids.push(h);
        }
        ids
    }
}

fn layer_norm_graph(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    let eps = g.precision().eps();
    let n = g.group_norm(x, 1, eps);
    let scaled = g.mul_row_vec(n, gain);
    g.add_row_vec(scaled, bias)
}

fn causal_bias(len: usize, precision: Precision) -> Tensor {
    let mut data = vec![0.0f64; len * len];
    for n in 0..len {
        for m in n + 1..len {
            data[n * len + m] = -1e30;
        }
    }
    Tensor::new(vec![len, len], data, precision).expect("bias")
}

fn attention_graph(
    g: &mut Graph,
    x: NodeId,
    nodes: &AttnParamNodes,
    heads: usize,
    len: usize,
) -> NodeId {
    let d = g.value(x).cols();
    let dh = d / heads;
    let precision = g.precision();
    let q = g.matmul(x, nodes.w_q);
    let k = g.matmul(x, nodes.w_k);
    let v = g.matmul(x, nodes.w_v);
    let angles = ops::rotation_angles(dh, precision).expect("angles");
    let positions: Vec<usize> = (0..len).collect();
    let bias = causal_bias(len, precision);

    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.slice_cols(q, i * dh, dh);
        let kh = g.slice_cols(k, i * dh, dh);
        let vh = g.slice_cols(v, i * dh, dh);
        let qr = g.rotate_rows(qh, angles.clone(), positions.clone(), Sign::Pos);
        let kr = g.rotate_rows(kh, angles.clone(), positions.clone(), Sign::Pos);
        let scores = g.matmul_ex(qr, false, kr, true);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = g.add_const(scaled, bias.clone());
        let probs = g.softmax_rows(masked);
        outs.push(g.matmul(probs, vh));
    }
    let concat = g.concat_cols(&outs);
    g.matmul(concat, nodes.w_o)
}

/// Dropout mask constant: keep with probability `1 - p`, scaled by
/// `1/(1-p)`.
fn dropout_mask(rng: &mut Rng, shape: Vec<usize>, p: f64, precision: Precision) -> Tensor {
    let numel: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data = (0..numel)
        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data, precision).expect("mask")
}

/// Build the whole model on a tape. Training paradigms only (parallel or
/// chunkwise); decoding goes through [`DecodeSession`].
pub fn model_graph(
    g: &mut Graph,
    tokens: &[u32],
    config: &ModelConfig,
    params: &ModelParams,
    paradigm: Paradigm,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(NodeId, ParamNodes)> {
    config.validate()?;
    if matches!(paradigm, Paradigm::Recurrent) {
        return Err(Error::invalid(
            "model_graph",
            "recurrent paradigm is not a tape path; use decode sessions",
        ));
    }
    for &t in tokens {
        if t as usize >= config.vocab_size {
            return Err(Error::OutOfVocab { id: t, vocab: config.vocab_size });
        }
    }
    let len = tokens.len();
    let nodes = ParamNodes::register(g, params);
    let mut x = g.embed(nodes.embed, tokens);

    for (b, bn) in params.blocks.iter().zip(&nodes.blocks) {
        let normed = layer_norm_graph(g, x, bn.norm1_gain, bn.norm1_bias);
        let mut branch = match (&b.mixer, &bn.mixer) {
            (MixerParams::Retention(m), MixerNodes::Retention(mn)) => {
                msr_graph(g, normed, m, mn, &config.flags, config.norm, paradigm)
            }
            (MixerParams::Attention(a), MixerNodes::Attention(an)) => {
                attention_graph(g, normed, an, a.heads, len)
            }
            _ => unreachable!("mixer params and nodes always align"),
        };
        if config.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let mask = dropout_mask(
                    rng,
                    g.value(branch).shape().to_vec(),
                    config.dropout,
                    config.precision,
                );
                branch = g.mul_const(branch, mask);
            }
        }
        x = g.add(x, branch);

        let normed2 = layer_norm_graph(g, x, bn.norm2_gain, bn.norm2_bias);
        let mid = g.matmul(normed2, bn.ffn_w1);
        let act = g.gelu(mid);
        let mut ffn = g.matmul(act, bn.ffn_w2);
        if config.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let mask = dropout_mask(
                    rng,
                    g.value(ffn).shape().to_vec(),
                    config.dropout,
                    config.precision,
                );
                ffn = g.mul_const(ffn, mask);
            }
        }
        x = g.add(x, ffn);
    }

    let final_normed = layer_norm_graph(g, x, nodes.final_gain, nodes.final_bias);
    let head = nodes.head.unwrap_or(nodes.embed);
    let logits = g.matmul_ex(final_normed, false, head, true);
    Ok((logits, nodes))
}

/// Full-sequence logits under the chosen paradigm.
///
/// Logits at position `n` depend only on tokens at positions `<= n`; the
/// paradigm changes the computation path, not the result.
pub fn forward(
    tokens: &[u32],
    config: &ModelConfig,
    params: &ModelParams,
    paradigm: Paradigm,
) -> Result<Tensor> {
    match paradigm {
        Paradigm::Parallel | Paradigm::Chunkwise(_) => {
            let mut g = Graph::new(config.precision);
            let (logits, _) = model_graph(&mut g, tokens, config, params, paradigm, None)?;
            Ok(g.value(logits).clone())
        }
        Paradigm::Recurrent => {
            let mut session = DecodeSession::new(config)?;
            let mut rows = Vec::with_capacity(tokens.len());
            for &t in tokens {
                let logits = session.step(t, params)?;
                rows.push(logits.into_data());
            }
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            Ok(Tensor::from_rows(&refs, config.precision)?)
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

// ── decoding ────────────────────────────────────────────────────────

/// Per-layer growing key/value store for baseline decoding. Keys are cached
/// after rotation.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    k: Vec<f64>, // position-major rows of d values
    v: Vec<f64>,
}

impl KvCache {
    pub fn element_count(&self) -> usize {
        self.k.len() + self.v.len()
    }
}

enum SessionState {
    Retention(Vec<MSRState>),
    Cache(Vec<KvCache>),
}

/// Single-owner autoregressive decoding state, advanced one token at a time.
///
/// For retention models the element count is exactly constant in the
/// position; for the baseline it grows by `2 * layers * d_model` per step.
pub struct DecodeSession {
    config: ModelConfig,
    state: SessionState,
    position: usize,
    peak_workspace: usize,
}

impl DecodeSession {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let state = match config.arch {
            Arch::RetNet => SessionState::Retention(Vec::new()), // lazily sized on first step
            Arch::Transformer => {
                SessionState::Cache((0..config.layers).map(|_| KvCache::default()).collect())
            }
        };
        Ok(DecodeSession { config: config.clone(), state, position: 0, peak_workspace: 0 })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Exact count of floats stored across all layers.
    pub fn state_element_count(&self) -> usize {
        match &self.state {
            SessionState::Retention(layers) => layers.iter().map(MSRState::element_count).sum(),
            SessionState::Cache(layers) => layers.iter().map(KvCache::element_count).sum(),
        }
    }

    /// Largest transient tensor allocated by any step so far.
    pub fn peak_workspace_elements(&self) -> usize {
        self.peak_workspace
    }

    fn note_workspace(&mut self, numel: usize) {
        self.peak_workspace = self.peak_workspace.max(numel);
    }

    /// Absorb one token, return next-token logits (`[vocab]`).
    pub fn step(&mut self, token: u32, params: &ModelParams) -> Result<Tensor> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::OutOfVocab { id: token, vocab: self.config.vocab_size });
        }
        let config = self.config.clone();
        let p = config.precision;
        let d = config.d_model;
        let eps = p.eps();

        let mut x = Tensor::new(
            vec![1, d],
            params.embed.row(token as usize).to_vec(),
            p,
        )?;
        self.note_workspace(d);

        for (l, block) in params.blocks.iter().enumerate() {
            let normed = ops::layer_norm(&x, &block.norm1.gain, &block.norm1.bias, eps)?;
            let branch = match &block.mixer {
                MixerParams::Retention(m) => {
                    let state = match &mut self.state {
                        SessionState::Retention(layers) => {
                            if layers.len() <= l {
                                layers.push(MSRState::zeros(m, p));
                            }
                            &layers[l]
                        }
                        _ => unreachable!("retention params imply retention state"),
                    };
                    let (out, next) = msr_forward(
                        &normed,
                        m,
                        &config.flags,
                        config.norm,
                        Paradigm::Recurrent,
                        Some(state),
                    )?;
                    self.note_workspace(next.element_count());
                    match &mut self.state {
                        SessionState::Retention(layers) => layers[l] = next,
                        _ => unreachable!(),
                    }
                    out
                }
                MixerParams::Attention(a) => {
                    let cache = match &mut self.state {
                        SessionState::Cache(layers) => &mut layers[l],
                        _ => unreachable!("attention params imply kv cache"),
                    };
                    let out = attention_step(&normed, a, cache, self.position, p)?;
                    let ws = (self.position + 1) + 3 * d;
                    self.peak_workspace = self.peak_workspace.max(ws);
                    out
                }
            };
            x = x.add(&branch)?;

            let normed2 = ops::layer_norm(&x, &block.norm2.gain, &block.norm2.bias, eps)?;
            let mid = ops::gelu(&ops::matmul(&normed2, &block.ffn_w1)?);
            self.note_workspace(mid.numel());
            let ffn = ops::matmul(&mid, &block.ffn_w2)?;
            x = x.add(&ffn)?;
        }

        let final_normed = ops::layer_norm(&x, &params.final_norm.gain, &params.final_norm.bias, eps)?;
        let head = params.head.as_ref().unwrap_or(&params.embed);
        let logits = ops::matmul_ex(&final_normed, false, head, true)?;
        self.note_workspace(logits.numel());
        self.position += 1;
        Ok(Tensor::new(vec![self.config.vocab_size], logits.into_data(), p)?)
    }
}

/// One baseline attention step against the cache. Appends the rotated key
/// and value for the current position, then attends over the whole history.
fn attention_step(
    x: &Tensor,
    params: &AttnParams,
    cache: &mut KvCache,
    position: usize,
    precision: Precision,
) -> Result<Tensor> {
    let d = x.cols();
    let h = params.heads;
    let dh = d / h;
    let angles = ops::rotation_angles(dh, precision)?;

    let q = ops::matmul(x, &params.w_q)?;
    let k = ops::matmul(x, &params.w_k)?;
    let v = ops::matmul(x, &params.w_v)?;

    // rotate q and k per head at the absolute position
    let mut q_rot = vec![0.0f64; d];
    let mut k_rot = vec![0.0f64; d];
    for i in 0..h {
        let qh = Tensor::new(vec![1, dh], q.data()[i * dh..(i + 1) * dh].to_vec(), precision)?;
        let kh = Tensor::new(vec![1, dh], k.data()[i * dh..(i + 1) * dh].to_vec(), precision)?;
        let qr = ops::rotate_pairs(&qh, &angles, position, Sign::Pos)?;
        let kr = ops::rotate_pairs(&kh, &angles, position, Sign::Pos)?;
        q_rot[i * dh..(i + 1) * dh].copy_from_slice(qr.data());
        k_rot[i * dh..(i + 1) * dh].copy_from_slice(kr.data());
    }
    cache.k.extend_from_slice(&k_rot);
    cache.v.extend_from_slice(v.data());

    let steps = position + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f64; d];
    for i in 0..h {
        // scores over the cached history for this head
        let mut scores = Vec::with_capacity(steps);
        for m in 0..steps {
            let krow = &cache.k[m * d + i * dh..m * d + (i + 1) * dh];
            let dot: f64 = q_rot[i * dh..(i + 1) * dh]
                .iter()
                .zip(krow)
                .map(|(a, b)| a * b)
                .sum();
            scores.push(precision.quantize(dot * scale));
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            denom += *s;
        }
        for m in 0..steps {
            let w = precision.quantize(scores[m] / denom);
            if w == 0.0 {
                continue;
            }
            let vrow = &cache.v[m * d + i * dh..m * d + (i + 1) * dh];
            for (o, val) in out[i * dh..(i + 1) * dh].iter_mut().zip(vrow) {
                *o += w * val;
            }
        }
    }
    let concat = Tensor::new(vec![1, d], out, precision)?;
    ops::matmul(&concat, &params.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> (ModelConfig, ModelParams) {
        let mut config = match arch {
            Arch::RetNet => ModelConfig::retnet(2, 16, 2, 24),
            Arch::Transformer => ModelConfig::transformer(2, 16, 2, 24),
        };
        config.seed = 5;
        let mut rng = Rng::new(config.seed);
        let params = init_params(&config, &mut rng).unwrap();
        (config, params)
    }

    fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
        (0..len).map(|_| rng.below(vocab) as u32).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = ModelConfig::retnet(1, 8, 2, 16);
        let a = init_params(&config, &mut Rng::new(3)).unwrap();
        let b = init_params(&config, &mut Rng::new(3)).unwrap();
        assert_eq!(a.embed.data(), b.embed.data());
        let c = init_params(&config, &mut Rng::new(4)).unwrap();
        assert_ne!(a.embed.data(), c.embed.data());
    }

    #[test]
    fn init_std_is_near_target() {
        let config = ModelConfig::retnet(1, 64, 2, 64);
        let params = init_params(&config, &mut Rng::new(9)).unwrap();
        let embed = &params.embed; // 64*64 = 4096 elements
        let n = embed.numel() as f64;
        let mean = embed.data().iter().sum::<f64>() / n;
        let std = (embed.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() <= 0.2 * 0.02, "std {std}");
    }

    #[test]
    fn parameter_parity_both_widths() {
        for d in [64usize, 256] {
            let r = ModelConfig::retnet(1, d, 2, 32);
            let t = ModelConfig::transformer(1, d, 2, 32);
            assert_eq!(r.block_param_count(), 12 * d * d);
            assert_eq!(t.block_param_count(), 12 * d * d);
            let rp = init_params(&r, &mut Rng::new(1)).unwrap();
            let tp = init_params(&t, &mut Rng::new(1)).unwrap();
            assert_eq!(rp.non_embedding_param_count(), 12 * d * d);
            assert_eq!(tp.non_embedding_param_count(), 12 * d * d);
        }
    }

    #[test]
    fn forward_paradigms_agree_on_logits() {
        let (config, params) = tiny(Arch::RetNet);
        let mut rng = Rng::new(11);
        let tokens = random_tokens(&mut rng, 31, config.vocab_size);
        let par = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
        let cw = forward(&tokens, &config, &params, Paradigm::Chunkwise(7)).unwrap();
        let rec = forward(&tokens, &config, &params, Paradigm::Recurrent).unwrap();
        assert!(par.max_abs_diff(&cw) <= 1e-9, "{}", par.max_abs_diff(&cw));
        assert!(par.max_abs_diff(&rec) <= 1e-9, "{}", par.max_abs_diff(&rec));
    }

    #[test]
    fn baseline_decode_matches_parallel_forward() {
        let (config, params) = tiny(Arch::Transformer);
        let mut rng = Rng::new(12);
        let tokens = random_tokens(&mut rng, 24, config.vocab_size);
        let par = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
        let rec = forward(&tokens, &config, &params, Paradigm::Recurrent).unwrap();
        assert!(par.max_abs_diff(&rec) <= 1e-9, "{}", par.max_abs_diff(&rec));
    }

    #[test]
    fn causality_is_exact() {
        for arch in [Arch::RetNet, Arch::Transformer] {
            let (config, params) = tiny(arch);
            let mut rng = Rng::new(13);
            let mut tokens = random_tokens(&mut rng, 16, config.vocab_size);
            let base = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
            tokens[10] = (tokens[10] + 1) % config.vocab_size as u32;
            let bumped = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
            for n in 0..10 {
                for c in 0..config.vocab_size {
                    assert_eq!(base.at(n, c), bumped.at(n, c), "{arch:?} row {n}");
                }
            }
            assert_ne!(base.row(10), bumped.row(10));
        }
    }

    #[test]
    fn no_layers_means_position_independent_logits() {
        let mut config = ModelConfig::retnet(0, 8, 2, 12);
        config.seed = 2;
        let params = init_params(&config, &mut Rng::new(2)).unwrap();
        let logits = forward(&[3, 5, 3, 5], &config, &params, Paradigm::Parallel).unwrap();
        assert_eq!(logits.row(0), logits.row(2));
        assert_eq!(logits.row(1), logits.row(3));
        assert_ne!(logits.row(0), logits.row(1));
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let (config, params) = tiny(Arch::RetNet);
        let err = forward(&[0, 99], &config, &params, Paradigm::Parallel);
        assert!(matches!(err, Err(Error::OutOfVocab { id: 99, .. })));
        let mut session = DecodeSession::new(&config).unwrap();
        assert!(session.step(200, &params).is_err());
    }

    #[test]
    fn first_decode_step_equals_len_one_forward() {
        for arch in [Arch::RetNet, Arch::Transformer] {
            let (config, params) = tiny(arch);
            let single = forward(&[7], &config, &params, Paradigm::Parallel).unwrap();
            let mut session = DecodeSession::new(&config).unwrap();
            let logits = session.step(7, &params).unwrap();
            for c in 0..config.vocab_size {
                assert!((single.at(0, c) - logits.data()[c]).abs() <= 1e-10, "{arch:?}");
            }
        }
    }

    #[test]
    fn retention_session_memory_is_constant() {
        let (config, params) = tiny(Arch::RetNet);
        let mut session = DecodeSession::new(&config).unwrap();
        let mut counts = Vec::new();
        for step in 0..96 {
            session.step((step % 20) as u32, &params).unwrap();
            if [8, 64, 96].contains(&(step + 1)) {
                counts.push(session.state_element_count());
            }
        }
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        assert!(counts[0] > 0);
    }

    #[test]
    fn cache_session_memory_grows_linearly() {
        let (config, params) = tiny(Arch::Transformer);
        let mut session = DecodeSession::new(&config).unwrap();
        let mut at_n = 0;
        let mut at_2n = 0;
        for step in 0..64 {
            session.step((step % 20) as u32, &params).unwrap();
            if step + 1 == 32 {
                at_n = session.state_element_count();
            }
            if step + 1 == 64 {
                at_2n = session.state_element_count();
            }
        }
        assert_eq!(at_2n, 2 * at_n);
        assert_eq!(at_n, 2 * config.layers * 32 * config.d_model);
    }

    #[test]
    fn logits_stay_finite_across_flag_combinations() {
        let mut rng = Rng::new(14);
        let tokens = random_tokens(&mut rng, 64, 24);
        for bits in 0..16u32 {
            let flags = AblationFlags {
                no_gate: bits & 1 != 0,
                no_groupnorm: bits & 2 != 0,
                no_decay: bits & 4 != 0,
                single_scale: bits & 8 != 0,
                head_dim_override: None,
            };
            let mut config = ModelConfig::retnet(2, 16, 2, 24);
            config.flags = flags;
            config.precision = Precision::Fp32;
            let params = init_params(&config, &mut Rng::new(15)).unwrap();
            let logits = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
            assert!(logits.is_finite(), "flags {flags:?}");
        }
        // head width override as well
        let mut config = ModelConfig::retnet(1, 16, 2, 24);
        config.flags.head_dim_override = Some(4);
        config.precision = Precision::Fp32;
        let params = init_params(&config, &mut Rng::new(16)).unwrap();
        let logits = forward(&tokens, &config, &params, Paradigm::Parallel).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn dropout_zero_and_nonzero_paths() {
        let (mut config, params) = tiny(Arch::RetNet);
        config.dropout = 0.2;
        let tokens = vec![1u32, 2, 3, 4, 5, 6];
        let mut g = Graph::new(config.precision);
        let mut rng = Rng::new(17);
        let (logits, _) =
            model_graph(&mut g, &tokens, &config, &params, Paradigm::Parallel, Some(&mut rng))
                .unwrap();
        assert!(g.value(logits).is_finite());
        // without an rng the mask is skipped and eval matches dropout=0
        let mut g2 = Graph::new(config.precision);
        let (l2, _) =
            model_graph(&mut g2, &tokens, &config, &params, Paradigm::Parallel, None).unwrap();
        let mut clean = config.clone();
        clean.dropout = 0.0;
        let l3 = forward(&tokens, &clean, &params, Paradigm::Parallel).unwrap();
        assert!(g2.value(l2).max_abs_diff(&l3) <= 1e-12);
    }

    #[test]
    fn untied_head_is_used() {
        let mut config = ModelConfig::retnet(1, 8, 2, 12);
        config.tied_embedding = false;
        let params = init_params(&config, &mut Rng::new(18)).unwrap();
        assert!(params.head.is_some());
        let logits = forward(&[1, 2, 3], &config, &params, Paradigm::Parallel).unwrap();
        assert!(logits.is_finite());
    }
}
