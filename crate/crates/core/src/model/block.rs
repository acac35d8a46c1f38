use std::sync::Arc;

use edt_tensor::{Graph, Real, Rng, TensorError, Var};

use super::layers::{modulate, Init, Linear, LN_EPS};
use super::params::ParamStore;
use crate::error::Result;

/// adaLN-Zero transformer block: multi-head self-attention and a 4× GELU
/// feed-forward, each behind a gated residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EdtBlock {
    pub dim: usize,
    pub heads: usize,
    pub ada: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EdtBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::EdtError::Config(format!(
                "{name}: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            ada: Linear::new(store, &format!("{name}.ada"), dim, 6 * dim, Init::Zeros, rng)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, Init::Xavier, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, Init::Xavier, rng)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, Init::Xavier, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, Init::Xavier, rng)?,
        })
    }

    pub fn linears(&self) -> [&Linear; 5] {
        [&self.ada, &self.qkv, &self.proj, &self.fc1, &self.fc2]
    }

    /// Scalars held by the block's weight matrices.
    pub fn weight_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.linears().iter().map(|l| store.get(l.weight).numel()).sum()
    }

    /// Scalars held by the block's bias vectors.
    pub fn bias_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.linears()
            .iter()
            .filter_map(|l| l.bias)
            .map(|b| store.get(b).numel())
            .sum()
    }

    /// `x`: `[B, n, d]`; `cond`: `silu(c)` as `[B, d]`; `amm`: optional
    /// `n × n` post-softmax modulation.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        amm: Option<&Arc<[T]>>,
    ) -> Result<Var> {
        let d = self.dim;
        let mods = self.ada.forward(g, store, cond)?;
        let part = |g: &mut Graph<T>, i: usize| g.slice_last(mods, i * d, d);
        let (shift1, scale1, gate1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
        let (shift2, scale2, gate2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);

        let h = g.layer_norm(x, LN_EPS)?;
        let h = modulate(g, h, shift1, scale1)?;
        let a = self.attention(g, store, h, amm)?;
        let a = g.scale_rows(a, gate1)?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, LN_EPS)?;
        let h = modulate(g, h, shift2, scale2)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        let h = g.scale_rows(h, gate2)?;
        Ok(g.add(x, h)?)
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        amm: Option<&Arc<[T]>>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let (h, hd) = (self.heads, self.dim / self.heads);
        if let Some(m) = amm {
            if m.len() != n * n {
                return Err(TensorError::Shape {
                    op: "attention",
                    detail: format!("modulation of {} entries for {n} tokens", m.len()),
                }
                .into());
            }
        }
        let qkv = self.qkv.forward(g, store, x)?;
        let split = |g: &mut Graph<T>, which: usize| {
            let index = head_split_index(b, n, h, hd, which);
            g.gather(qkv, index.into(), &[b * h, n, hd])
        };
        let (q, k, v) = (split(g, 0)?, split(g, 1)?, split(g, 2)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (hd as f64).sqrt()))?;
        let mut att = g.softmax(scores)?;
        if let Some(m) = amm {
            att = g.const_mul(att, m.clone())?;
        }
        let out = g.batch_matmul(att, v, false)?;
        let merged = g.gather(out, head_merge_index(b, n, h, hd).into(), &[b, n, h * hd])?;
        self.proj.forward(g, store, merged)
    }
}

/// Index selecting `which` ∈ {q, k, v} from `[B, n, 3·h·D]` into `[B·h, n, D]`.
fn head_split_index(b: usize, n: usize, h: usize, hd: usize, which: usize) -> Vec<usize> {
    let d = h * hd;
    let mut index = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..n {
                let base = (bi * n + i) * 3 * d + which * d + hi * hd;
                index.extend(base..base + hd);
            }
        }
    }
    index
}

/// Index from `[B·h, n, D]` back to `[B, n, h·D]`.
fn head_merge_index(b: usize, n: usize, h: usize, hd: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(b * n * h * hd);
    for bi in 0..b {
        for i in 0..n {
            for hi in 0..h {
                let base = ((bi * h + hi) * n + i) * hd;
                index.extend(base..base + hd);
            }
        }
    }
    index
}
