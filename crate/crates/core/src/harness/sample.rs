//! Parallel class-conditional sampling and sample dumps.

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use edt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_tensors;
use super::image::Gray;
use crate::diffusion::{ddim_from, initial_noise, GuidanceConfig, NoiseSchedule, SamplerConfig};
use crate::error::{EdtError, Result};
use crate::model::Edt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    /// One class label per generated item.
    pub classes: Vec<usize>,
    pub steps: usize,
    /// Guidance weight; 1 disables the unconditional pass.
    pub cfg_scale: f64,
    pub seed: u64,
    /// Use the model's configured modulation matrices.
    pub amm: bool,
    /// Upper bound on worker threads; 1 is fully sequential.
    pub threads: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            classes: vec![0],
            steps: 50,
            cfg_scale: 1.0,
            seed: 0,
            amm: false,
            threads: 1,
        }
    }
}

/// Resolves `0` to the machine's available parallelism.
pub fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, NonZeroUsize::get)
    }
}

/// `[count, C, H, W]` samples. Item `i` always starts from the noise
/// stream derived from `(seed, i)`.
pub fn generate(model: &Edt<f32>, sched: &NoiseSchedule, opts: &SampleOptions) -> Result<Tensor<f32>> {
    if opts.classes.is_empty() {
        return Err(EdtError::Argument("nothing to sample".into()));
    }
    let cfg = model.config();
    if let Some(&c) = opts.classes.iter().find(|&&c| c > cfg.class_count) {
        return Err(EdtError::Argument(format!("class {c} out of range 0..={}", cfg.class_count)));
    }
    let mut model = model.clone();
    if opts.amm {
        model.attach_configured_amm()?;
    } else {
        model.detach_amm();
    }
    let sampler = SamplerConfig {
        steps: opts.steps,
        eta: 0.0,
        seed: opts.seed,
    };
    sampler.validate(sched)?;
    let guidance = GuidanceConfig::new(opts.cfg_scale, cfg.null_class())?;
    let [c, h, w] = cfg.latent_shape();
    let count = opts.classes.len();
    let workers = thread_count(opts.threads).min(count);
    let chunk = count.div_ceil(workers);
    let run = |first: usize, classes: &[usize]| -> Result<Tensor<f32>> {
        let x = initial_noise(&[classes.len(), c, h, w], opts.seed, first)?;
        ddim_from(&model, x, classes, sched, &sampler, Some(&guidance))
    };
    let parts: Vec<Result<Tensor<f32>>> = if workers == 1 {
        vec![run(0, &opts.classes)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = opts
                .classes
                .chunks(chunk)
                .enumerate()
                .map(|(k, cls)| {
                    let run = &run;
                    s.spawn(move || run(k * chunk, cls))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        })
    };
    let mut data = Vec::with_capacity(count * c * h * w);
    for p in parts {
        data.extend(p?.into_data());
    }
    Ok(Tensor::new(&[count, c, h, w], data)?)
}

/// Writes `base.json`/`base.bin` plus one PGM per item (channels tiled
/// horizontally) into `dir`. Returns the image paths.
pub fn write_samples(dir: &Path, samples: &Tensor<f32>, opts: &SampleOptions) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| EdtError::io(dir, e))?;
    let meta = serde_json::to_value(opts).map_err(|e| EdtError::Manifest(e.to_string()))?;
    save_tensors(&dir.join("samples"), &[("samples".into(), samples)], meta)?;
    let &[n, c, h, w] = samples.shape() else {
        return Err(EdtError::Argument(format!("samples of shape {:?}", samples.shape())));
    };
    let item = c * h * w;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let vals: Vec<f64> = samples.data()[i * item..(i + 1) * item].iter().map(|&v| v as f64).collect();
        let path = dir.join(format!("sample_{i:04}_class{}.pgm", opts.classes[i]));
        Gray::from_channels(&vals, c, h, w)?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads back a dump written by [`write_samples`].
pub fn read_samples(dir: &Path) -> Result<(Tensor<f32>, SampleOptions)> {
    let (mut tensors, manifest) = super::checkpoint::load_tensors::<f32>(&dir.join("samples"))?;
    let opts = serde_json::from_value(manifest.meta).map_err(|e| EdtError::Manifest(format!("sample metadata: {e}")))?;
    let (_, t) = tensors
        .pop()
        .ok_or_else(|| EdtError::Manifest("sample dump holds no tensor".into()))?;
    Ok((t, opts))
}
