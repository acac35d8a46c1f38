use std::f64::consts::LN_10;

use edt_tensor::{Graph, Real, Rng, Tensor, Var};

use super::params::ParamStore;
use crate::error::{EdtError, Result};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±√(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Normal(f64),
}

impl Init {
    pub(crate) fn tensor<T: Real>(self, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
        match self {
            Init::Xavier => {
                let fan: usize = shape.iter().sum();
                Tensor::rand_uniform(shape, (6.0 / fan as f64).sqrt(), rng)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
        }
    }
}

/// `y = x W + b` over the trailing axis; `W` is `[d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[d_in, d_out], rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight))?;
        let b = match self.bias {
            Some(id) => Some(g.param(id, store.get(id))?),
            None => None,
        };
        Ok(g.linear(x, w, b)?)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// `x·(1 + scale) + shift` with per-sample `scale`, `shift` of shape `[B, d]`.
pub fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = g.add_scalar(scale, T::one())?;
    let y = g.scale_rows(x, one_plus)?;
    Ok(g.shift_rows(y, shift)?)
}

/// Layer norm followed by a condition-dependent affine map, with the
/// `(shift, scale)` pair projected from `silu(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLn {
    pub proj: Linear,
}

impl AdaLn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_cond: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, d_cond, 2 * d, Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        let d = self.proj.d_out / 2;
        let mods = self.proj.forward(g, store, cond)?;
        let shift = g.slice_last(mods, 0, d)?;
        let scale = g.slice_last(mods, d, d)?;
        let h = g.layer_norm(x, LN_EPS)?;
        modulate(g, h, shift, scale)
    }
}

/// Sinusoidal timestep features `[cos(t·ω_i), sin(t·ω_i)]` with
/// `ω_i = 10000^(−i/half)`; output is `[B, dim]`.
pub fn timestep_features<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |k| {
        let (b, j) = (k / dim, k % dim);
        let i = j % half;
        let freq = (-(4.0 * LN_10) * i as f64 / half as f64).exp();
        let arg = t[b] as f64 * freq;
        T::of(if j < half { arg.cos() } else { arg.sin() })
    })
}

/// Fixed 2-D sinusoidal table `[side², dim]`: the first half of the features
/// encodes the row coordinate, the second half the column.
pub fn sincos_2d<T: Real>(side: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    Tensor::from_fn(&[side * side, dim], |k| {
        let (tok, j) = (k / dim, k % dim);
        let (row, col) = (tok / side, tok % side);
        let (pos, j) = if j < dim / 2 { (row, j) } else { (col, j - dim / 2) };
        let i = j % quarter;
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        let arg = pos as f64 * omega;
        T::of(if j < quarter { arg.sin() } else { arg.cos() })
    })
}

/// Gather index turning `[B, C, H, W]` into `[B, (H/p)·(W/p), C·p·p]`, with
/// features ordered `(channel, dy, dx)` and tokens in row-major grid order.
pub fn patchify_index(batch: usize, channels: usize, size: usize, p: usize) -> Vec<usize> {
    let side = size / p;
    let feat = channels * p * p;
    let mut index = Vec::with_capacity(batch * channels * size * size);
    for b in 0..batch {
        for tok in 0..side * side {
            let (r, c) = (tok / side, tok % side);
            for f in 0..feat {
                let (ch, dy, dx) = (f / (p * p), (f / p) % p, f % p);
                index.push(((b * channels + ch) * size + r * p + dy) * size + c * p + dx);
            }
        }
    }
    index
}

/// Inverse permutation of [`patchify_index`].
pub fn unpatchify_index(batch: usize, channels: usize, size: usize, p: usize) -> Vec<usize> {
    let forward = patchify_index(batch, channels, size, p);
    let mut inverse = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    inverse
}

/// Gather index for the 2×2 merge `[B, side², d] → [B, (side/2)², 4d]`;
/// window position `q = 2a + b` occupies features `q·d .. (q+1)·d`.
pub fn merge_index(batch: usize, side: usize, d: usize) -> Vec<usize> {
    let half = side / 2;
    let mut index = Vec::with_capacity(batch * side * side * d);
    for b in 0..batch {
        for tok in 0..half * half {
            let (r, c) = (tok / half, tok % half);
            for q in 0..4 {
                let src = (2 * r + q / 2) * side + 2 * c + q % 2;
                let base = (b * side * side + src) * d;
                index.extend(base..base + d);
            }
        }
    }
    index
}

/// Inverse of [`merge_index`]: `[B, (side/2)², 4d] → [B, side², d]`.
pub fn expand_index(batch: usize, side: usize, d: usize) -> Vec<usize> {
    let forward = merge_index(batch, side, d);
    let mut inverse = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    inverse
}

/// `[B, C, H, W] → [B, n, C·p²]` outside the graph.
pub fn patchify<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] || p == 0 || !s[2].is_multiple_of(p) {
        return Err(EdtError::Tensor(edt_tensor::TensorError::Shape {
            op: "patchify",
            detail: format!("latent {s:?} with patch size {p}"),
        }));
    }
    let index = patchify_index(s[0], s[1], s[2], p);
    let side = s[2] / p;
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::new(&[s[0], side * side, s[1] * p * p], data)?)
}

/// Inverse of [`patchify`] for `channels`-channel latents.
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, channels: usize, p: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    let side = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 3 || side * side != s[1] || s[2] != channels * p * p {
        return Err(EdtError::Tensor(edt_tensor::TensorError::Shape {
            op: "unpatchify",
            detail: format!("tokens {s:?} for {channels} channels, patch {p}"),
        }));
    }
    let size = side * p;
    let index = unpatchify_index(s[0], channels, size, p);
    let data = index.iter().map(|&i| tokens.data()[i]).collect();
    Ok(Tensor::new(&[s[0], channels, size, size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes_and_round_trip() {
        let mut rng = Rng::new(0);
        let x = Tensor::<f64>::randn(&[2, 4, 16, 16], 1.0, &mut rng);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[2, 64, 16]);
        assert_eq!(unpatchify(&t, 4, 2).unwrap(), x);
        let x = Tensor::<f64>::zeros(&[1, 4, 32, 32]);
        assert_eq!(patchify(&x, 2).unwrap().shape(), &[1, 256, 16]);
        assert!(patchify(&Tensor::<f64>::zeros(&[1, 4, 15, 15]), 2).is_err());
    }

    #[test]
    fn patch_features_follow_layout() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let t = patchify(&x, 2).unwrap();
        // Token 1 is grid cell (0, 1): columns 2..4 of rows 0..2.
        assert_eq!(&t.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn merge_collects_windows() {
        // side 4, d 1: token value = its index.
        let x: Vec<usize> = (0..16).collect();
        let idx = merge_index(1, 4, 1);
        let merged: Vec<usize> = idx.iter().map(|&i| x[i]).collect();
        assert_eq!(&merged[0..4], &[0, 1, 4, 5]);
        assert_eq!(&merged[4..8], &[2, 3, 6, 7]);
        assert_eq!(&merged[12..16], &[10, 11, 14, 15]);
        let back: Vec<usize> = expand_index(1, 4, 1).iter().map(|&i| merged[i]).collect();
        assert_eq!(back, x);
    }

    #[test]
    fn sincos_table_values() {
        let pe = sincos_2d::<f64>(3, 8);
        // Token (1, 2): row features sin/cos(1·ω), column features sin/cos(2·ω).
        let row = &pe.data()[5 * 8..6 * 8];
        assert_eq!(row[0], 1f64.sin());
        assert_eq!(row[1], (1.0 / 100.0f64).sin());
        assert_eq!(row[2], 1f64.cos());
        assert_eq!(row[4], 2f64.sin());
        assert_eq!(row[7], (2.0 / 100.0f64).cos());
    }

    #[test]
    fn timestep_features_values() {
        let f = timestep_features::<f64>(&[0, 3], 4);
        assert_eq!(&f.data()[0..4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.data()[4], 3f64.cos());
        assert!((f.data()[5] - (3.0f64 / 100.0).cos()).abs() < 1e-15);
    }
}
