//! Masked multi-head attention of a centre-patch query over its neighbourhood.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::neighbourhood_len;
use crate::ndiff::{Array, Element, Graph, ParamId, ParamStore, Var};

/// Logit written at masked positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    None,
    Sin1d,
    #[default]
    Rel2d,
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EncodingKind::None),
            "sin1d" => Ok(EncodingKind::Sin1d),
            "rel2d" => Ok(EncodingKind::Rel2d),
            other => Err(Error::invalid(format!(
                "unknown positional encoding `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    /// Embedding dimension `D` of queries, keys and values before projection.
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub k: usize,
    pub encoding: EncodingKind,
}

impl AttnConfig {
    pub fn desk(k: usize) -> Self {
        AttnConfig {
            dim: 64,
            heads: 2,
            head_dim: 16,
            k,
            encoding: EncodingKind::Rel2d,
        }
    }

    pub fn paper(k: usize) -> Self {
        AttnConfig {
            dim: 1024,
            heads: 8,
            head_dim: 128,
            k,
            encoding: EncodingKind::Rel2d,
        }
    }

    pub fn neighbours(&self) -> usize {
        neighbourhood_len(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid(format!(
                "attention needs D, h, d >= 1 (got {}, {}, {})",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.encoding == EncodingKind::Rel2d && self.head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "rel2d encoding needs an even head dim, got {}",
                self.head_dim
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one attention block.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub config: AttnConfig,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub bo: ParamId,
    /// `(2k+1) x d/2` row and column offset tables for rel2d.
    pub rel: Option<(ParamId, ParamId)>,
}

impl MhaParams {
    /// Projections are uniform in `±1/sqrt(fan_in)`; the output bias starts at zero.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        config: AttnConfig,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let AttnConfig {
            dim,
            heads,
            head_dim,
            k,
            ..
        } = config;
        let s_in = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str, rng: &mut _| {
            (0..heads)
                .map(|h| {
                    store.add_uniform(format!("{prefix}.h{h}.{name}"), &[dim, head_dim], s_in, rng)
                })
                .collect::<Vec<_>>()
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let cat = heads * head_dim;
        let wo = store.add_uniform(
            format!("{prefix}.wo"),
            &[cat, dim],
            1.0 / (cat as f64).sqrt(),
            rng,
        );
        let bo = store.add(format!("{prefix}.bo"), Array::zeros(&[dim]));
        let rel = (config.encoding == EncodingKind::Rel2d).then(|| {
            let side = 2 * k + 1;
            let s = 1.0 / (head_dim as f64).sqrt();
            let row = store.add_uniform(format!("{prefix}.b_row"), &[side, head_dim / 2], s, rng);
            let col = store.add_uniform(format!("{prefix}.b_col"), &[side, head_dim / 2], s, rng);
            (row, col)
        });
        Ok(MhaParams {
            config,
            wq,
            wk,
            wv,
            wo,
            bo,
            rel,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .copied()
            .collect();
        ids.extend([self.wo, self.bo]);
        if let Some((r, c)) = self.rel {
            ids.extend([r, c]);
        }
        ids
    }
}

/// Fixed sinusoid over the flattened neighbourhood index:
/// entry `2i` is `sin(t / 10000^(2i/d))`, entry `2i+1` the matching cosine.
pub fn sin1d_table<T: Element>(k: usize, d: usize) -> Array<T> {
    let n = neighbourhood_len(k);
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        for e in 0..d {
            let i = (e / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::from_f64(if e % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Array::from_vec(&[n, d], data).expect("table shape")
}

/// `(2k+1)^2 x d` key bias for the configured encoding.
pub fn position_bias<T: Element>(g: &mut Graph<'_, T>, params: &MhaParams) -> Result<Var> {
    let AttnConfig {
        k,
        head_dim: d,
        encoding,
        ..
    } = params.config;
    let n = neighbourhood_len(k);
    match (encoding, params.rel) {
        (EncodingKind::None, _) => Ok(g.input(Array::zeros(&[n, d]))),
        (EncodingKind::Sin1d, _) => Ok(g.input(sin1d_table(k, d))),
        (EncodingKind::Rel2d, Some((row, col))) => {
            if d % 2 != 0 {
                return Err(Error::invalid(format!(
                    "rel2d encoding needs an even head dim, got {d}"
                )));
            }
            let side = 2 * k + 1;
            let half = d / 2;
            let row = g.param(row);
            let col = g.param(col);
            let row = g.reshape(row, &[side, 1, half])?;
            let row = g.broadcast_expand(row, &[side, side, half])?;
            let col = g.reshape(col, &[1, side, half])?;
            let col = g.broadcast_expand(col, &[side, side, half])?;
            let table = g.concat(&[row, col], 2)?;
            g.reshape(table, &[n, d])
        }
        (EncodingKind::Rel2d, None) => Err(Error::invalid("rel2d encoding without offset tables")),
    }
}

/// Scaled dot-product attention of queries `[B, d]` over keys and values
/// `[B, n, d]` with a `B * n` validity mask. Returns weights `[B, 1, n]` and
/// outputs `[B, d]`. Masked weights are exactly zero, so a fully masked row
/// yields a zero output.
pub fn masked_attention<T: Element>(
    g: &mut Graph<'_, T>,
    q: Var,
    keys: Var,
    values: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        g.shape(q).to_vec(),
        g.shape(keys).to_vec(),
        g.shape(values).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 3 || ks != vs || ks[0] != qs[0] || ks[2] != qs[1] {
        return Err(Error::shape(
            "masked_attention",
            format!("q {qs:?}, K {ks:?}, V {vs:?}"),
        ));
    }
    let (b, n, d) = (ks[0], ks[1], ks[2]);
    if mask.len() != b * n {
        return Err(Error::shape(
            "masked_attention",
            format!("mask of {} for {b}x{n}", mask.len()),
        ));
    }
    let q = g.reshape(q, &[b, 1, d])?;
    let logits = g.matmul_nt(q, keys)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = g.masked_fill(logits, mask, MASKED_LOGIT)?;
    let weights = g.softmax(logits)?;
    let weights = g.masked_fill(weights, mask, 0.0)?;
    let out = g.matmul(weights, values)?;
    let out = g.reshape(out, &[b, d])?;
    Ok((weights, out))
}

pub struct AttentionOutput {
    /// Context embeddings `[B, D]`.
    pub a: Var,
    /// Attention weights `[B, h, n]`.
    pub scores: Array<f32>,
}

/// Context embeddings for a batch of centre embeddings `e_c: [B, D]` over
/// neighbourhoods `memory: [B, n, D]`. The memory enters the graph as a
/// constant, so no gradient reaches the bank.
pub fn mha_context<T: Element>(
    g: &mut Graph<'_, T>,
    params: &MhaParams,
    e_c: Var,
    memory: &Array<T>,
    mask: &[bool],
) -> Result<AttentionOutput> {
    let AttnConfig {
        dim,
        heads,
        head_dim: d,
        ..
    } = params.config;
    let n = params.config.neighbours();
    let es = g.shape(e_c).to_vec();
    let ms = memory.shape();
    if es.len() != 2
        || es[1] != dim
        || ms.len() != 3
        || ms[0] != es[0]
        || ms[1] != n
        || ms[2] != dim
    {
        return Err(Error::shape(
            "mha_context",
            format!("centre {es:?}, memory {ms:?} for D = {dim}, n = {n}"),
        ));
    }
    if params.wq.len() != heads || params.wk.len() != heads || params.wv.len() != heads {
        return Err(Error::shape(
            "mha_context",
            format!("{} query projections for {heads} heads", params.wq.len()),
        ));
    }
    let b = es[0];
    let mem = g.input(memory.clone());
    let bias = position_bias(g, params)?;
    let bias = g.reshape(bias, &[1, n, d])?;
    let bias = g.broadcast_expand(bias, &[b, n, d])?;
    let mut outs = Vec::with_capacity(heads);
    let mut scores = vec![0.0f32; b * heads * n];
    for h in 0..heads {
        let (wq, wk, wv) = (
            g.param(params.wq[h]),
            g.param(params.wk[h]),
            g.param(params.wv[h]),
        );
        if g.shape(wq) != [dim, d] {
            return Err(Error::shape(
                "mha_context",
                format!("head {h} projection {:?}", g.shape(wq)),
            ));
        }
        let q = g.linear(e_c, wq, None)?;
        let keys = g.linear(mem, wk, None)?;
        let keys = g.add(keys, bias)?;
        let values = g.linear(mem, wv, None)?;
        let (w, out) = masked_attention(g, q, keys, values, mask)?;
        for (bi, row) in g.value(w).data().chunks(n).enumerate() {
            let dst = &mut scores[(bi * heads + h) * n..(bi * heads + h + 1) * n];
            for (s, &v) in dst.iter_mut().zip(row) {
                *s = v.to_f64() as f32;
            }
        }
        outs.push(out);
    }
    let cat = g.concat(&outs, 1)?;
    let (wo, bo) = (g.param(params.wo), g.param(params.bo));
    let a = g.linear(cat, wo, Some(bo))?;
    Ok(AttentionOutput {
        a,
        scores: Array::from_vec(&[b, heads, n], scores)?,
    })
}
