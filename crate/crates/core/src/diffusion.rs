//! Noise schedule, forward corruption, noise-prediction loss,
//! classifier-free guidance and deterministic DDIM sampling.

use edt_tensor::{Graph, Real, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};
use crate::model::{Edt, ForwardOptions};

/// Linear β schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(EdtError::Config(format!(
                "invalid schedule: {steps} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + frac * (beta_end - beta_start)
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(EdtError::Domain(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

fn per_sample<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    t: &[usize],
    f: impl Fn(f64, f64, usize) -> f64,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape().first() != Some(&t.len()) {
        return Err(edt_tensor::TensorError::Shape {
            op: "diffuse",
            detail: format!("{:?} and {:?} for {} timesteps", a.shape(), b.shape(), t.len()),
        }
        .into());
    }
    let item = a.numel() / t.len().max(1);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| T::of(f(x.as_f64(), y.as_f64(), t[i / item])))
        .collect();
    Ok(Tensor::new(a.shape(), data)?)
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, with one timestep per leading index.
pub fn forward_diffuse<T: Real>(x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    for &ti in t {
        sched.check_t(ti)?;
    }
    per_sample(x0, eps, t, |x, e, ti| {
        let ab = sched.alpha_bar(ti);
        ab.sqrt() * x + (1.0 - ab).sqrt() * e
    })
}

/// `x₀ = (x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn recover_x0<T: Real>(x_t: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    for &ti in t {
        sched.check_t(ti)?;
    }
    per_sample(x_t, eps, t, |x, e, ti| {
        let ab = sched.alpha_bar(ti);
        (x - (1.0 - ab).sqrt() * e) / ab.sqrt()
    })
}

/// One training draw: corrupted inputs, their noise, timesteps and the
/// (possibly dropped) class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<usize>,
    pub classes: Vec<usize>,
}

/// How training timesteps are spread over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    /// Independent uniform draws.
    Uniform,
    /// One uniform offset `u`; item `b` gets `⌊T·frac(u + b/B)⌋ + 1`. Each
    /// item is still uniform on `[1, T]`, but a batch always covers the range.
    #[default]
    Stratified,
}

pub fn draw_timesteps(batch: usize, total: usize, sampling: TimestepSampling, rng: &mut Rng) -> Vec<usize> {
    match sampling {
        TimestepSampling::Uniform => (0..batch).map(|_| rng.below(total) + 1).collect(),
        TimestepSampling::Stratified => {
            let u = rng.uniform();
            (0..batch)
                .map(|b| {
                    let v = (u + b as f64 / batch as f64).fract();
                    ((v * total as f64) as usize).min(total - 1) + 1
                })
                .collect()
        }
    }
}

/// Draws, in order, a timestep per sample, the noise tensor, then one
/// uniform per sample deciding whether its class becomes `null_class`.
pub fn sample_noised_batch<T: Real>(
    x0: &Tensor<T>,
    classes: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    p_uncond: f64,
    null_class: usize,
) -> Result<NoisedBatch<T>> {
    sample_noised_batch_with(x0, classes, sched, rng, p_uncond, null_class, TimestepSampling::Uniform)
}

/// [`sample_noised_batch`] with a choice of timestep spread.
pub fn sample_noised_batch_with<T: Real>(
    x0: &Tensor<T>,
    classes: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    p_uncond: f64,
    null_class: usize,
    sampling: TimestepSampling,
) -> Result<NoisedBatch<T>> {
    let b = classes.len();
    if x0.shape().first() != Some(&b) {
        return Err(EdtError::Argument(format!(
            "batch {:?} with {b} labels",
            x0.shape()
        )));
    }
    let t = draw_timesteps(b, sched.steps(), sampling, rng);
    let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.numel()))?;
    let classes = classes
        .iter()
        .map(|&c| if rng.uniform() < p_uncond { null_class } else { c })
        .collect();
    let x_t = forward_diffuse(x0, &t, &eps, sched)?;
    Ok(NoisedBatch { x_t, eps, t, classes })
}

/// Mean squared noise-prediction error on a fresh draw.
pub fn training_loss<T: Real>(
    model: &Edt<T>,
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    classes: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    p_uncond: f64,
) -> Result<Var> {
    let batch = sample_noised_batch(x0, classes, sched, rng, p_uncond, model.config().null_class())?;
    noise_mse(model, g, &batch)
}

/// `mean((ε_θ(x_t, c) − ε)²)` for an existing draw.
pub fn noise_mse<T: Real>(model: &Edt<T>, g: &mut Graph<T>, batch: &NoisedBatch<T>) -> Result<Var> {
    let x = g.input(batch.x_t.clone())?;
    let eps = g.input(batch.eps.clone())?;
    let opts = ForwardOptions {
        amm: false,
        ..Default::default()
    };
    let pred = model.forward(g, x, &batch.t, &batch.classes, &opts)?;
    Ok(g.mse(pred, eps)?)
}

/// Anything that predicts noise from `(x_t, t, c)`.
pub trait Denoiser<T: Real> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize], classes: &[usize]) -> Result<Tensor<T>>;
    fn null_class(&self) -> usize;
}

impl<T: Real> Denoiser<T> for Edt<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize], classes: &[usize]) -> Result<Tensor<T>> {
        self.predict(x_t, t, classes)
    }

    fn null_class(&self) -> usize {
        self.config().null_class()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub null_class: usize,
}

impl GuidanceConfig {
    pub fn new(omega: f64, null_class: usize) -> Result<Self> {
        if !(omega.is_finite() && omega >= 1.0) {
            return Err(EdtError::Domain(format!("guidance weight {omega} must be >= 1")));
        }
        Ok(Self { omega, null_class })
    }
}

fn stack<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(&shape, data)?)
}

/// `ε(∅) + ω·(ε(c) − ε(∅))`. With `ω = 1` only the conditional pass runs;
/// otherwise both passes share one batch.
pub fn cfg_predict<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    x_t: &Tensor<T>,
    t: &[usize],
    classes: &[usize],
    g: &GuidanceConfig,
) -> Result<Tensor<T>> {
    GuidanceConfig::new(g.omega, g.null_class)?;
    if g.omega == 1.0 {
        return model.predict_noise(x_t, t, classes);
    }
    let b = t.len();
    let x2 = stack(x_t, x_t)?;
    let t2: Vec<usize> = t.iter().chain(t).copied().collect();
    let c2: Vec<usize> = classes.iter().copied().chain(std::iter::repeat_n(g.null_class, b)).collect();
    let both = model.predict_noise(&x2, &t2, &c2)?;
    let half = both.numel() / 2;
    let (cond, uncond) = both.data().split_at(half);
    let w = T::of(g.omega);
    let data = cond.iter().zip(uncond).map(|(&c, &u)| u + w * (c - u)).collect();
    Ok(Tensor::new(x_t.shape(), data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.steps() {
            return Err(EdtError::Config(format!(
                "sampler steps {} must lie in [1, {}]",
                self.steps,
                sched.steps()
            )));
        }
        if self.eta != 0.0 {
            return Err(EdtError::Config("only deterministic sampling (eta = 0) is supported".into()));
        }
        Ok(())
    }
}

/// Descending sub-sequence `round((i+1)·T/S)` for `i = S−1, …, 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .rev()
        .map(|i| ((i + 1) as f64 * total as f64 / steps as f64).round() as usize)
        .collect()
}

/// Standard normal start point; item `b` uses the stream derived from
/// `(seed, b)` so draws do not depend on batch composition.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64, first_item: usize) -> Result<Tensor<T>> {
    let b = shape.first().copied().unwrap_or(0);
    let item: usize = shape.iter().skip(1).product();
    let mut data = Vec::with_capacity(b * item);
    for i in 0..b {
        data.extend(Rng::derive(seed, (first_item + i) as u64).normal_vec::<T>(item));
    }
    Ok(Tensor::new(shape, data)?)
}

/// One deterministic update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step<T: Real>(x: &Tensor<T>, eps: &Tensor<T>, ab_t: f64, ab_prev: f64) -> Result<Tensor<T>> {
    x.zip_with(eps, |xv, ev| {
        let (xv, ev) = (xv.as_f64(), ev.as_f64());
        let x0 = (xv - (1.0 - ab_t).sqrt() * ev) / ab_t.sqrt();
        T::of(ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ev)
    })
    .map_err(Into::into)
}

/// Runs the deterministic chain from `x_init`.
pub fn ddim_from<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    x_init: Tensor<T>,
    classes: &[usize],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor<T>> {
    sampler.validate(sched)?;
    let b = classes.len();
    let steps = ddim_timesteps(sched.steps(), sampler.steps);
    let mut x = x_init;
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let tt = vec![t; b];
        let eps = match guidance {
            Some(g) => cfg_predict(model, &x, &tt, classes, g)?,
            None => model.predict_noise(&x, &tt, classes)?,
        };
        x = ddim_step(&x, &eps, sched.alpha_bar(t), sched.alpha_bar(prev))?;
        if !x.is_finite() {
            return Err(edt_tensor::TensorError::NonFinite { op: "ddim_step" }.into());
        }
    }
    Ok(x)
}

/// Samples `shape = [B, C, H, W]` with `classes[b]` for item `b`.
pub fn ddim_sample<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    shape: &[usize],
    classes: &[usize],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor<T>> {
    if shape.first() != Some(&classes.len()) {
        return Err(EdtError::Argument(format!("shape {shape:?} with {} classes", classes.len())));
    }
    let x = initial_noise(shape, sampler.seed, 0)?;
    ddim_from(model, x, classes, sched, sampler, guidance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_timesteps_cover_the_range() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let mut t = draw_timesteps(8, 1000, TimestepSampling::Stratified, &mut rng);
            assert!(t.iter().all(|&v| (1..=1000).contains(&v)));
            t.sort_unstable();
            for w in t.windows(2) {
                assert!((124..=126).contains(&(w[1] - w[0])));
            }
        }
        let mut hist = [0usize; 4];
        for _ in 0..4000 {
            hist[(draw_timesteps(1, 1000, TimestepSampling::Stratified, &mut rng)[0] - 1) / 250] += 1;
        }
        assert!(hist.iter().all(|&h| (850..1150).contains(&h)), "{hist:?}");
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn timesteps_descend_to_first_step() {
        assert_eq!(ddim_timesteps(1000, 1), vec![1000]);
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250]);
        let ts = ddim_timesteps(1000, 250);
        assert_eq!(ts.len(), 250);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*ts.last().unwrap(), 4);
        assert_eq!(ddim_timesteps(10, 10), (1..=10).rev().collect::<Vec<_>>());
    }

    #[test]
    fn diffuse_endpoints_and_inverse() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(2);
        let x0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let xt = forward_diffuse(&x0, &[10, 900], &eps, &s).unwrap();
        let back = recover_x0(&xt, &[10, 900], &eps, &s).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-12);
        assert!(forward_diffuse(&x0, &[0, 1], &eps, &s).is_err());
        assert!(forward_diffuse(&x0, &[1, 1001], &eps, &s).is_err());
    }

    #[test]
    fn guidance_weight_checked() {
        assert!(GuidanceConfig::new(0.5, 8).is_err());
        assert!(GuidanceConfig::new(1.0, 8).is_ok());
    }
}
