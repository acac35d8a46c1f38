use std::sync::Arc;

use edt_tensor::{Graph, Real, Rng, Tensor, TensorError, Var};

use super::layers::{expand_index, merge_index, sincos_2d, AdaLn, Init, Linear};
use super::params::ParamStore;
use crate::error::Result;

fn grid_side(g: &Graph<impl Real>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op,
            detail: format!("expected [B, n, d], got {s:?}"),
        }
        .into());
    }
    let side = (s[1] as f64).sqrt().round() as usize;
    if side * side != s[1] {
        return Err(TensorError::Shape {
            op,
            detail: format!("{} tokens do not form a square grid", s[1]),
        }
        .into());
    }
    Ok((s[0], side, s[2]))
}

/// Hook for the masked training pass: which merged positions to replace and,
/// for isolation checks, a seed that scrambles their pre-substitution content.
#[derive(Clone, Debug)]
pub struct MaskHook<'a> {
    pub mask: &'a Arc<[bool]>,
    pub scramble: Option<u64>,
}

/// Replaces masked rows with `token`, optionally scrambling them first.
pub(crate) fn substitute<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    token: Var,
    hook: &MaskHook<'_>,
) -> Result<Var> {
    let mut x = x;
    if let Some(seed) = hook.scramble {
        let s = g.shape(x).to_vec();
        let (n, d) = (s[1], s[2]);
        let mut rng = Rng::new(seed);
        let noise = Tensor::from_fn(&s, |k| {
            let v = T::of(rng.normal() * 10.0);
            if hook.mask[(k / d) % n] {
                v
            } else {
                T::zero()
            }
        });
        let noise = g.input(noise)?;
        x = g.add(x, noise)?;
    }
    Ok(g.replace_rows(x, token, hook.mask.clone())?)
}

/// Condition-aware 2×2 token merge: AdaLN, window concatenation, linear
/// projection `4·d_in → d_out`, optional mask substitution, positional
/// encoding of the merged grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub d_in: usize,
    pub d_out: usize,
    pub ada: AdaLn,
    pub merge: Linear,
    pub mask_token: usize,
}

impl Downsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_in,
            d_out,
            ada: AdaLn::new(store, &format!("{name}.ada"), d_in, d_in, rng)?,
            merge: Linear::new(store, &format!("{name}.merge"), 4 * d_in, d_out, Init::Xavier, rng)?,
            mask_token: store.add(format!("{name}.mask_token"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        mask: Option<&MaskHook<'_>>,
    ) -> Result<Var> {
        let (b, side, d) = grid_side(g, x, "downsample")?;
        if side % 2 != 0 {
            return Err(TensorError::Shape {
                op: "downsample",
                detail: format!("grid side {side} is odd"),
            }
            .into());
        }
        let half = side / 2;
        let h = self.ada.forward(g, store, x, cond)?;
        let merged = g.gather(h, merge_index(b, side, d).into(), &[b, half * half, 4 * d])?;
        let mut y = self.merge.forward(g, store, merged)?;
        if let Some(hook) = mask {
            let token = g.param(self.mask_token, store.get(self.mask_token))?;
            y = substitute(g, y, token, hook)?;
        }
        let pe = g.input(sincos_2d(half, self.d_out))?;
        Ok(g.add_broadcast(y, pe)?)
    }
}

/// Linear expansion `d_in → 4·d_out` followed by unfolding every token into
/// a 2×2 window.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsample {
    pub d_in: usize,
    pub d_out: usize,
    pub expand: Linear,
}

impl Upsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_in,
            d_out,
            expand: Linear::new(store, &format!("{name}.expand"), d_in, 4 * d_out, Init::Xavier, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, side, _) = grid_side(g, x, "upsample")?;
        let y = self.expand.forward(g, store, x)?;
        let full = 2 * side;
        let index = expand_index(b, full, self.d_out);
        Ok(g.gather(y, index.into(), &[b, full * full, self.d_out])?)
    }
}

/// Encoder-to-decoder junction: AdaLN on the encoder tokens, concatenation
/// with the decoder tokens, projection to the decoder width, positional
/// encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LongSkip {
    pub d_enc: usize,
    pub d_dec: usize,
    pub ada: AdaLn,
    pub fuse: Linear,
}

impl LongSkip {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_enc: usize,
        d_dec: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            d_enc,
            d_dec,
            ada: AdaLn::new(store, &format!("{name}.ada"), d_dec, d_enc, rng)?,
            fuse: Linear::new(store, &format!("{name}.fuse"), d_enc + d_dec, d_dec, Init::Xavier, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc: Var,
        dec: Var,
        cond: Var,
    ) -> Result<Var> {
        let (_, side, _) = grid_side(g, dec, "long_skip")?;
        if g.shape(enc)[..2] != g.shape(dec)[..2] {
            return Err(TensorError::Shape {
                op: "long_skip",
                detail: format!("encoder {:?} vs decoder {:?}", g.shape(enc), g.shape(dec)),
            }
            .into());
        }
        let e = self.ada.forward(g, store, enc, cond)?;
        let cat = g.concat(e, dec)?;
        let y = self.fuse.forward(g, store, cat)?;
        let pe = g.input(sincos_2d(side, self.d_dec))?;
        Ok(g.add_broadcast(y, pe)?)
    }
}

/// AdaLN-modulated, zero-initialised projection to patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalLayer {
    pub ada: AdaLn,
    pub head: Linear,
}

impl FinalLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ada: AdaLn::new(store, &format!("{name}.ada"), d, d, rng)?,
            head: Linear::new(store, &format!("{name}.head"), d, out, Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, cond: Var) -> Result<Var> {
        let h = self.ada.forward(g, store, x, cond)?;
        self.head.forward(g, store, h)
    }
}
