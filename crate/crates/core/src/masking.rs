//! Token masking for training: masks inside the two down-sampling modules,
//! and an input-grid variant for comparison.

use std::sync::Arc;

use edt_tensor::{Graph, Real, Rng, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffusion::NoisedBatch;
use crate::error::{EdtError, Result};
use crate::model::{Edt, ForwardOptions};

const COUNT_SLACK: f64 = 1e-9;

/// Mask-ratio ranges of the first and second down-sampling modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub stage1_ratio_range: [f64; 2],
    pub stage2_ratio_range: [f64; 2],
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            stage1_ratio_range: [0.4, 0.5],
            stage2_ratio_range: [0.1, 0.2],
        }
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            stage1_ratio_range: [0.0, 0.0],
            stage2_ratio_range: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range(self.stage1_ratio_range)?;
        check_range(self.stage2_ratio_range)
    }
}

fn check_range([lo, hi]: [f64; 2]) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(EdtError::Config(format!(
            "mask ratio range [{lo}, {hi}] must satisfy 0 <= low <= high < 1"
        )));
    }
    Ok(())
}

/// Masked positions of one square token grid (`true` = masked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    side: usize,
    flags: Arc<[bool]>,
}

impl MaskGrid {
    pub fn new(side: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != side * side {
            return Err(EdtError::Argument(format!(
                "{} mask flags for a {side}x{side} grid",
                flags.len()
            )));
        }
        Ok(Self {
            side,
            flags: flags.into(),
        })
    }

    pub fn empty(side: usize) -> Self {
        Self {
            side,
            flags: vec![false; side * side].into(),
        }
    }

    pub fn full(side: usize) -> Self {
        Self {
            side,
            flags: vec![true; side * side].into(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tokens(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &Arc<[bool]> {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.tokens() as f64
    }

    pub(crate) fn check_tokens(&self, n: usize) -> Result<()> {
        if self.tokens() != n {
            return Err(TensorError::Shape {
                op: "mask",
                detail: format!("mask over {} tokens applied to {n}", self.tokens()),
            }
            .into());
        }
        Ok(())
    }
}

/// Number of masked tokens for `ratio` on an `n`-token grid: `⌊ratio·n⌋`
/// clamped to the counts whose fraction lies in `range`.
pub fn mask_count(n: usize, ratio: f64, [lo, hi]: [f64; 2]) -> Result<usize> {
    let nf = n as f64;
    let min = (lo * nf - COUNT_SLACK).ceil().max(0.0) as usize;
    let max = (hi * nf + COUNT_SLACK).floor() as usize;
    if min > max {
        return Err(EdtError::Config(format!(
            "no mask count on {n} tokens has a fraction in [{lo}, {hi}]"
        )));
    }
    let raw = (ratio * nf + COUNT_SLACK).floor() as usize;
    Ok(raw.clamp(min, max))
}

/// Draws a ratio uniformly from `range` and masks that many positions,
/// chosen uniformly without replacement.
pub fn sample_mask(side: usize, range: [f64; 2], rng: &mut Rng) -> Result<MaskGrid> {
    check_range(range)?;
    let n = side * side;
    let ratio = if range[0] == range[1] {
        range[0]
    } else {
        rng.uniform_range(range[0], range[1])
    };
    let k = mask_count(n, ratio, range)?;
    random_grid(side, k, rng)
}

/// Masks exactly `⌊ratio·n⌋` positions, chosen uniformly without
/// replacement.
pub fn fixed_ratio_mask(side: usize, ratio: f64, rng: &mut Rng) -> Result<MaskGrid> {
    check_range([ratio, ratio])?;
    let n = side * side;
    let k = mask_count(n, ratio, [0.0, ratio])?;
    random_grid(side, k, rng)
}

fn random_grid(side: usize, k: usize, rng: &mut Rng) -> Result<MaskGrid> {
    let n = side * side;
    let mut flags = vec![false; n];
    for i in rng.choose_indices(n, k) {
        flags[i] = true;
    }
    MaskGrid::new(side, flags)
}

/// Masks of the first and second down-sampling modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageMasks {
    pub first: MaskGrid,
    pub second: MaskGrid,
}

impl StageMasks {
    pub fn empty(config: &ModelConfig) -> Self {
        let s = config.stage_sides();
        Self {
            first: MaskGrid::empty(s[1]),
            second: MaskGrid::empty(s[2]),
        }
    }
}

/// Independent masks for both down-sampling modules, first then second.
pub fn sample_stage_masks(config: &ModelConfig, spec: &MaskSpec, rng: &mut Rng) -> Result<StageMasks> {
    let s = config.stage_sides();
    Ok(StageMasks {
        first: sample_mask(s[1], spec.stage1_ratio_range, rng)?,
        second: sample_mask(s[2], spec.stage2_ratio_range, rng)?,
    })
}

/// Replaces the masked rows of `tokens` (`[B, n, d]`) with `token` (`[d]`).
pub fn apply_mask<T: Real>(g: &mut Graph<T>, tokens: Var, grid: &MaskGrid, token: Var) -> Result<Var> {
    grid.check_tokens(g.shape(tokens).get(1).copied().unwrap_or(0))?;
    Ok(g.replace_rows(tokens, token, grid.flags().clone())?)
}

/// The two loss terms of one training step, recorded on the same graph.
#[derive(Clone, Copy, Debug)]
pub struct LossPair {
    pub full: Var,
    pub masked: Var,
}

impl LossPair {
    pub fn total<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        Ok(g.add(self.full, self.masked)?)
    }
}

fn noise_loss<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    batch: &NoisedBatch<T>,
    opts: &ForwardOptions<'_>,
) -> Result<Var> {
    let x = g.input(batch.x_t.clone())?;
    let eps = g.input(batch.eps.clone())?;
    let pred = model.forward(g, x, &batch.t, &batch.classes, opts)?;
    Ok(g.mse(pred, eps)?)
}

/// Unmasked loss plus the loss with `masks` active in both down-sampling
/// modules; both reuse the batch's `(t, ε)` draw.
pub fn edt_losses_with_masks<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    batch: &NoisedBatch<T>,
    masks: &StageMasks,
) -> Result<LossPair> {
    let train = ForwardOptions {
        amm: false,
        ..Default::default()
    };
    let full = noise_loss(model, g, batch, &train)?;
    let masked = noise_loss(
        model,
        g,
        batch,
        &ForwardOptions {
            stage_masks: Some(masks),
            ..train
        },
    )?;
    Ok(LossPair { full, masked })
}

/// Samples masks from `spec` and records both loss terms.
pub fn edt_training_losses<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    batch: &NoisedBatch<T>,
    spec: &MaskSpec,
    rng: &mut Rng,
) -> Result<LossPair> {
    let masks = sample_stage_masks(model.config(), spec, rng)?;
    edt_losses_with_masks(model, g, batch, &masks)
}

/// Input-grid variant: exactly `⌊ratio·n⌋` patch tokens are replaced before
/// the first stage.
pub fn mdt_style_losses<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    batch: &NoisedBatch<T>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<LossPair> {
    let mask = fixed_ratio_mask(model.config().grid_side(), ratio, rng)?;
    mdt_losses_with_mask(model, g, batch, &mask)
}

pub fn mdt_losses_with_mask<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    batch: &NoisedBatch<T>,
    mask: &MaskGrid,
) -> Result<LossPair> {
    let train = ForwardOptions {
        amm: false,
        ..Default::default()
    };
    let full = noise_loss(model, g, batch, &train)?;
    let masked = noise_loss(
        model,
        g,
        batch,
        &ForwardOptions {
            input_mask: Some(mask),
            ..train
        },
    )?;
    Ok(LossPair { full, masked })
}
