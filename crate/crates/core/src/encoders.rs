//! Modeling stage: shape-preserving maps on `(B, C, L, D)`.
//!
//! Mixing runs over the temporal token axis `L` when it holds more than one
//! token and over the variate axis `C` otherwise (variate-wise views).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{ForwardCtx, Linear, ParamBuilder};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Mlp,
    Identity,
    Spectral,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::Transformer,
        EncoderKind::Mlp,
        EncoderKind::Identity,
        EncoderKind::Spectral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Mlp => "mlp",
            EncoderKind::Identity => "identity",
            EncoderKind::Spectral => "spectral",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub layers: usize,
    /// Attention heads; defaults to 8 when `D >= 64` and 8 divides `D`, else 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Feed-forward width; defaults to `2·D`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, layers: usize) -> Self {
        Self {
            kind,
            layers,
            heads: None,
            d_ff: None,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn resolved_heads(&self, d: usize) -> usize {
        self.heads
            .unwrap_or(if d >= 64 && d.is_multiple_of(8) { 8 } else { 1 })
    }
}

/// Axis the encoder mixes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenAxis {
    /// Temporal tokens (axis 2).
    L,
    /// Variates (axis 1); used when `L == 1`.
    C,
}

impl TokenAxis {
    pub fn select(l: usize) -> Self {
        if l > 1 {
            TokenAxis::L
        } else {
            TokenAxis::C
        }
    }

    pub fn index(self) -> usize {
        match self {
            TokenAxis::L => 2,
            TokenAxis::C => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenAxis::L => "L",
            TokenAxis::C => "C",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn build(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Self {
        let mut s = pb.scoped(name);
        Norm {
            gamma: s.constant("gamma", Tensor::full(&[d], 1.0)),
            beta: s.constant("beta", Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm1: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct MixerBlock {
    token1: Linear,
    token2: Linear,
    feat1: Linear,
    feat2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct SpectralBlock {
    re: ParamId,
    im: ParamId,
}

#[derive(Clone, Debug)]
enum Blocks {
    Identity,
    Transformer(Vec<AttentionBlock>),
    Mlp(Vec<MixerBlock>),
    Spectral(Vec<SpectralBlock>),
}

/// An assembled encoder for a fixed latent shape `(C, L, D)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub axis: TokenAxis,
    dims: (usize, usize, usize),
    heads: usize,
    blocks: Blocks,
}

impl Encoder {
    pub fn build(spec: &EncoderSpec, dims: (usize, usize, usize), pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let (c, l, d) = dims;
        let axis = TokenAxis::select(l);
        let tokens = if axis == TokenAxis::L { l } else { c };
        if spec.kind != EncoderKind::Identity && spec.layers == 0 {
            return Err(Error::Parameter(format!(
                "{} encoder needs at least one layer",
                spec.kind.as_str()
            )));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", spec.dropout)));
        }
        let heads = spec.resolved_heads(d);
        let d_ff = spec.d_ff.unwrap_or(2 * d);
        let blocks = match spec.kind {
            EncoderKind::Identity => Blocks::Identity,
            EncoderKind::Transformer => {
                if heads == 0 || d % heads != 0 {
                    return Err(Error::Parameter(format!(
                        "{heads} attention heads do not divide latent width D={d}"
                    )));
                }
                Blocks::Transformer(
                    (0..spec.layers)
                        .map(|i| {
                            let mut s = pb.scoped(&format!("attn{i}"));
                            AttentionBlock {
                                norm1: Norm::build(&mut s, "norm1", d),
                                query: s.linear("query", d, d),
                                key: s.linear("key", d, d),
                                value: s.linear("value", d, d),
                                out: s.linear("out", d, d),
                                norm2: Norm::build(&mut s, "norm2", d),
                                ff1: s.linear("ff1", d, d_ff),
                                ff2: s.linear("ff2", d_ff, d),
                            }
                        })
                        .collect(),
                )
            }
            EncoderKind::Mlp => Blocks::Mlp(
                (0..spec.layers)
                    .map(|i| {
                        let mut s = pb.scoped(&format!("mixer{i}"));
                        MixerBlock {
                            token1: s.linear("token1", tokens, 2 * tokens),
                            token2: s.linear("token2", 2 * tokens, tokens),
                            feat1: s.linear("feat1", d, d_ff),
                            feat2: s.linear("feat2", d_ff, d),
                        }
                    })
                    .collect(),
            ),
            EncoderKind::Spectral => Blocks::Spectral(
                (0..spec.layers)
                    .map(|i| {
                        let mut s = pb.scoped(&format!("spectral{i}"));
                        SpectralBlock {
                            re: s.constant("re", Tensor::full(&[tokens], 1.0)),
                            im: s.constant("im", Tensor::zeros(&[tokens])),
                        }
                    })
                    .collect(),
            ),
        };
        Ok(Self {
            spec: spec.clone(),
            axis,
            dims,
            heads,
            blocks,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, z: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let (_, c, l, d) = g.value(z).dims4()?;
        if (c, l, d) != self.dims {
            return dim_err(format!(
                "{} encoder built for (C, L, D) = {:?}, got {:?}",
                self.spec.kind.as_str(),
                self.dims,
                (c, l, d)
            ));
        }
        match &self.blocks {
            Blocks::Identity => Ok(z),
            Blocks::Transformer(blocks) => {
                // tokens on axis 2
                let mut h = if self.axis == TokenAxis::C { g.swap_axes(z, 1, 2)? } else { z };
                for b in blocks {
                    h = self.attention_block(g, params, b, h, ctx)?;
                }
                if self.axis == TokenAxis::C {
                    h = g.swap_axes(h, 1, 2)?;
                }
                Ok(h)
            }
            Blocks::Mlp(blocks) => {
                let mut h = if self.axis == TokenAxis::C { g.swap_axes(z, 1, 2)? } else { z };
                for b in blocks {
                    let t = g.swap_axes(h, 2, 3)?;
                    let t = b.token1.forward(g, params, t)?;
                    let t = g.gelu(t);
                    let t = b.token2.forward(g, params, t)?;
                    let t = g.swap_axes(t, 2, 3)?;
                    let t = g.dropout(t, self.spec.dropout, ctx.rng, ctx.training)?;
                    h = g.add(h, t)?;
                    let f = b.feat1.forward(g, params, h)?;
                    let f = g.gelu(f);
                    let f = b.feat2.forward(g, params, f)?;
                    let f = g.dropout(f, self.spec.dropout, ctx.rng, ctx.training)?;
                    h = g.add(h, f)?;
                }
                if self.axis == TokenAxis::C {
                    h = g.swap_axes(h, 1, 2)?;
                }
                Ok(h)
            }
            Blocks::Spectral(blocks) => {
                let mut h = z;
                for b in blocks {
                    let re = g.param(params, b.re);
                    let im = g.param(params, b.im);
                    let f = g.spectral_filter(h, re, im, self.axis.index())?;
                    let s = g.add(h, f)?;
                    h = g.scale(s, 0.5);
                }
                Ok(h)
            }
        }
    }

    /// Pre-norm block on `(B, X, S, D)` with `S` tokens on axis 2.
    fn attention_block(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        blk: &AttentionBlock,
        h: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let (b, x, s, d) = g.value(h).dims4()?;
        let heads = self.heads;
        let dh = d / heads;
        let n = blk.norm1.forward(g, params, h)?;
        let split = |g: &mut Graph, v: Var, axes: &[usize]| -> Result<Var> {
            let r = g.reshape(v, &[b, x, s, heads, dh])?;
            g.permute(r, axes)
        };
        let q = blk.query.forward(g, params, n)?;
        let q = split(g, q, &[0, 1, 3, 2, 4])?;
        let k = blk.key.forward(g, params, n)?;
        let kt = split(g, k, &[0, 1, 3, 4, 2])?;
        let v = blk.value.forward(g, params, n)?;
        let v = split(g, v, &[0, 1, 3, 2, 4])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores, 4)?;
        let ctxv = g.matmul(weights, v)?;
        let merged = g.permute(ctxv, &[0, 1, 3, 2, 4])?;
        let merged = g.reshape(merged, &[b, x, s, d])?;
        let attn = blk.out.forward(g, params, merged)?;
        let attn = g.dropout(attn, self.spec.dropout, ctx.rng, ctx.training)?;
        let h = g.add(h, attn)?;

        let n2 = blk.norm2.forward(g, params, h)?;
        let f = blk.ff1.forward(g, params, n2)?;
        let f = g.gelu(f);
        let f = blk.ff2.forward(g, params, f)?;
        let f = g.dropout(f, self.spec.dropout, ctx.rng, ctx.training)?;
        g.add(h, f)
    }
}
