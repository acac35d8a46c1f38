//! Single-writer training loop with bit-exact checkpoint resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use edt_tensor::{Graph, Rng, RngState, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_tensors, save_tensors};
use super::data::{DatasetSpec, SyntheticDataset};
use crate::config::{read_json, write_json, ModelConfig};
use crate::diffusion::{noise_mse, sample_noised_batch_with, NoiseSchedule, ScheduleConfig, TimestepSampling};
use crate::error::{EdtError, Result};
use crate::masking::{edt_training_losses, mdt_style_losses};
use crate::model::Edt;
use crate::optim::{Adam, OptimConfig};

pub const EMA_FACTOR: f64 = 0.99;
pub const LOG_HEADER: &str = "iteration,l_full,l_masked,lr,ema_l_full,ema_l_masked";

/// Which auxiliary masked loss accompanies the plain noise loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Masks inside both down-sampling modules.
    Edt,
    /// Masks patch tokens before the first stage.
    Mdt,
    /// Plain noise-prediction loss only.
    None,
}

/// A preset name, a path to a model JSON, or an inline model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named(String),
    Inline(Box<ModelConfig>),
}

impl ModelRef {
    /// Presets win over paths; relative paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<ModelConfig> {
        let cfg = match self {
            ModelRef::Inline(c) => (**c).clone(),
            ModelRef::Named(name) => match ModelConfig::preset(name) {
                Ok(c) => c,
                Err(_) => {
                    let path = base.join(name);
                    if !path.is_file() {
                        return Err(EdtError::Config(format!(
                            "model {name:?} is neither a preset nor an existing file ({})",
                            path.display()
                        )));
                    }
                    ModelConfig::load(&path)?
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelRef,
    #[serde(default)]
    pub data: DatasetSpec,
    /// Size of the training pool drawn from the dataset.
    #[serde(default = "default_train_items")]
    pub train_items: usize,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_p_uncond")]
    pub p_uncond: f64,
    #[serde(default)]
    pub timestep_sampling: TimestepSampling,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Input mask ratio for [`Strategy::Mdt`].
    #[serde(default = "default_mdt_ratio")]
    pub mdt_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// 0 keeps only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

fn default_train_items() -> usize {
    4096
}

fn default_batch() -> usize {
    16
}

fn default_p_uncond() -> f64 {
    0.1
}

fn default_strategy() -> Strategy {
    Strategy::Edt
}

fn default_mdt_ratio() -> f64 {
    0.3
}

impl RunConfig {
    pub fn new(model: ModelConfig, iterations: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelRef::Inline(Box::new(model)),
            data: DatasetSpec::default(),
            train_items: default_train_items(),
            iterations,
            batch_size: default_batch(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            p_uncond: default_p_uncond(),
            timestep_sampling: TimestepSampling::default(),
            strategy: default_strategy(),
            mdt_ratio: default_mdt_ratio(),
            seed: 0,
            checkpoint_every: 0,
            output_dir: output_dir.into(),
        }
    }

    /// Reads a run file, resolving the model reference and a relative
    /// output directory against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut run: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        run.model = ModelRef::Inline(Box::new(run.model.resolve(base)?));
        if run.output_dir.is_relative() {
            run.output_dir = base.join(&run.output_dir);
        }
        Ok(run)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(Path::new("."))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.model_config()?;
        let [c, h, w] = cfg.latent_shape();
        let d = &self.data;
        if [d.channels, d.size, d.size] != [c, h, w] {
            return Err(EdtError::Config(format!(
                "dataset extent {}x{}x{} does not match model latent {c}x{h}x{w}",
                d.channels, d.size, d.size
            )));
        }
        if d.class_count != cfg.class_count {
            return Err(EdtError::Config(format!(
                "dataset has {} classes, model {}",
                d.class_count, cfg.class_count
            )));
        }
        if self.batch_size == 0 || self.train_items == 0 {
            return Err(EdtError::Config("batch_size and train_items must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(EdtError::Config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn checkpoint_base(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:07}"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("loss.csv")
    }
}

/// One logged iteration. `l_masked` is absent for [`Strategy::None`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub l_full: f64,
    pub l_masked: Option<f64>,
    pub lr: f64,
    pub ema_full: f64,
    pub ema_masked: Option<f64>,
}

impl StepLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.l_full,
            opt(self.l_masked),
            self.lr,
            self.ema_full,
            opt(self.ema_masked)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || EdtError::Argument(format!("malformed loss log line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            l_full: num(f[1])?,
            l_masked: opt(f[2])?,
            lr: num(f[3])?,
            ema_full: num(f[4])?,
            ema_masked: opt(f[5])?,
        })
    }
}

/// Parses a loss log written by [`Trainer`], skipping comment lines.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| EdtError::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && *l != LOG_HEADER && !l.is_empty())
        .map(StepLog::parse)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Ema {
    full: Option<f64>,
    masked: Option<f64>,
}

fn smooth(prev: Option<f64>, x: f64) -> f64 {
    match prev {
        Some(p) => EMA_FACTOR * p + (1.0 - EMA_FACTOR) * x,
        None => x,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    kind: String,
    step: u64,
    adam_step: u64,
    rng: RngState,
    ema: Ema,
    run: RunConfig,
}

pub struct Trainer {
    run: RunConfig,
    model: Edt<f32>,
    adam: Adam<f32>,
    rng: Rng,
    data: SyntheticDataset,
    sched: NoiseSchedule,
    step: u64,
    ema: Ema,
}

impl Trainer {
    /// Fresh run: model initialized from `run.seed`, data stream from a
    /// stream derived from the same seed.
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let cfg = run.model_config()?;
        let model = Edt::new(cfg, run.seed)?;
        let adam = Adam::new(run.optim.clone(), model.params().tensors());
        let rng = Rng::derive(run.seed, u64::MAX);
        Self::assemble(run, model, adam, rng, 0, Ema::default())
    }

    fn assemble(run: RunConfig, model: Edt<f32>, adam: Adam<f32>, rng: Rng, step: u64, ema: Ema) -> Result<Self> {
        let data = SyntheticDataset::generate(run.data.clone())?;
        let sched = NoiseSchedule::from_config(&run.schedule)?;
        Ok(Self {
            run,
            model,
            adam,
            rng,
            data,
            sched,
            step,
            ema,
        })
    }

    /// Restores model, optimizer, rng and smoothing state from `base`.
    /// `iterations`, when given, replaces the stored run length.
    pub fn resume(base: &Path, iterations: Option<u64>) -> Result<Self> {
        let (tensors, manifest) = load_tensors::<f32>(base)?;
        let meta: TrainMeta = serde_json::from_value(manifest.meta)
            .map_err(|e| EdtError::Manifest(format!("training metadata: {e}")))?;
        if meta.kind != "train" {
            return Err(EdtError::Manifest(format!("{} is not a training checkpoint", base.display())));
        }
        let mut run = meta.run;
        if let Some(n) = iterations {
            run.iterations = n;
        }
        run.validate()?;
        let mut model = Edt::new(run.model_config()?, run.seed)?;
        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.m/") {
                m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.push((n.to_string(), t));
            } else {
                return Err(EdtError::Manifest(format!("unexpected tensor {name}")));
            }
        }
        model.params_mut().load(params)?;
        let mut adam = Adam::new(run.optim.clone(), model.params().tensors());
        adam.step = meta.adam_step;
        adam.m = order_like(&model, m, "adam.m")?;
        adam.v = order_like(&model, v, "adam.v")?;
        let rng = Rng::from_state(meta.rng);
        Self::assemble(run, model, adam, rng, meta.step, meta.ema)
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &Edt<f32> {
        &self.model
    }

    pub fn into_model(self) -> Edt<f32> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    /// One optimizer update on a freshly drawn minibatch.
    pub fn step(&mut self) -> Result<StepLog> {
        let run = &self.run;
        let indices: Vec<usize> = (0..run.batch_size).map(|_| self.rng.below(run.train_items)).collect();
        let (x0, classes) = self.data.batch::<f32>(indices);
        let null = self.model.config().null_class();
        let batch = sample_noised_batch_with(
            &x0,
            &classes,
            &self.sched,
            &mut self.rng,
            run.p_uncond,
            null,
            run.timestep_sampling,
        )?;
        let mut g = Graph::new();
        let (full, masked) = match run.strategy {
            Strategy::Edt => {
                let spec = self.model.config().mask.clone();
                let pair = edt_training_losses(&self.model, &mut g, &batch, &spec, &mut self.rng)?;
                (pair.full, Some(pair.masked))
            }
            Strategy::Mdt => {
                let pair = mdt_style_losses(&self.model, &mut g, &batch, run.mdt_ratio, &mut self.rng)?;
                (pair.full, Some(pair.masked))
            }
            Strategy::None => (noise_mse(&self.model, &mut g, &batch)?, None),
        };
        let total = match masked {
            Some(m) => g.add(full, m)?,
            None => full,
        };
        let grads = g.backward(total)?;
        let lr = run.optim.lr(self.step, run.iterations);
        let n = self.model.params().len();
        let gs: Vec<Option<&Tensor<f32>>> = (0..n).map(|id| grads.param(id)).collect();
        self.adam.update(self.model.params_mut().tensors_mut(), &gs, lr)?;
        self.step += 1;
        let l_full = g.value(full).item()?.into();
        let l_masked: Option<f64> = masked.map(|m| g.value(m).item().map(f64::from)).transpose()?;
        self.ema.full = Some(smooth(self.ema.full, l_full));
        if let Some(lm) = l_masked {
            self.ema.masked = Some(smooth(self.ema.masked, lm));
        }
        if !l_full.is_finite() {
            return Err(edt_tensor::TensorError::NonFinite { op: "training loss" }.into());
        }
        Ok(StepLog {
            iteration: self.step,
            l_full,
            l_masked,
            lr,
            ema_full: self.ema.full.unwrap_or(l_full),
            ema_masked: self.ema.masked,
        })
    }

    /// Writes the current state to `base` (`.json` + `.bin`).
    pub fn save(&self, base: &Path) -> Result<()> {
        let store = self.model.params();
        let mut entries: Vec<(String, &Tensor<f32>)> = Vec::with_capacity(3 * store.len());
        for (name, t) in store.iter() {
            entries.push((format!("param/{name}"), t));
        }
        for (id, t) in self.adam.m.iter().enumerate() {
            entries.push((format!("adam.m/{}", store.name(id)), t));
        }
        for (id, t) in self.adam.v.iter().enumerate() {
            entries.push((format!("adam.v/{}", store.name(id)), t));
        }
        let meta = TrainMeta {
            kind: "train".into(),
            step: self.step,
            adam_step: self.adam.step,
            rng: self.rng.state(),
            ema: self.ema,
            run: self.run.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| EdtError::Manifest(e.to_string()))?;
        save_tensors(base, &entries, meta)?;
        Ok(())
    }

    /// Runs to `iterations`, appending to the loss log and checkpointing at
    /// the start (fresh runs only), every `checkpoint_every` steps and at
    /// the end. `on_step` sees each log entry.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<PathBuf>> {
        let out = self.run.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| EdtError::io(&out, e))?;
        write_json(&out.join("run.json"), &self.run)?;
        let mut log = self.open_log()?;
        let mut saved = Vec::new();
        if self.step == 0 {
            let base = self.run.checkpoint_base(0);
            self.save(&base)?;
            saved.push(base);
        }
        while self.step < self.run.iterations {
            let entry = self.step()?;
            writeln!(log, "{}", entry.csv_line()).expect("writing to a String");
            on_step(&entry);
            let every = self.run.checkpoint_every;
            if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.run.iterations {
                let base = self.run.checkpoint_base(self.step);
                self.save(&base)?;
                saved.push(base);
                self.flush_log(&log)?;
            }
        }
        self.flush_log(&log)?;
        Ok(saved)
    }

    /// Existing log truncated to this trainer's step, or a fresh header.
    fn open_log(&self) -> Result<String> {
        let mut log = format!("# ema_factor={EMA_FACTOR}\n{LOG_HEADER}\n");
        let path = self.run.log_path();
        if self.step > 0 && path.is_file() {
            for entry in read_loss_log(&path)? {
                if entry.iteration <= self.step {
                    writeln!(log, "{}", entry.csv_line()).expect("writing to a String");
                }
            }
        }
        Ok(log)
    }

    fn flush_log(&self, log: &str) -> Result<()> {
        let path = self.run.log_path();
        fs::write(&path, log).map_err(|e| EdtError::io(&path, e))
    }
}

fn order_like(model: &Edt<f32>, entries: Vec<(String, Tensor<f32>)>, what: &str) -> Result<Vec<Tensor<f32>>> {
    let store = model.params();
    let mut slots: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| EdtError::Manifest(format!("unexpected {what} tensor {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(EdtError::Manifest(format!("{what} tensor {name} has shape {:?}", t.shape())));
        }
        slots[id] = Some(t);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or_else(|| EdtError::Manifest(format!("missing {what} tensor {}", store.name(id)))))
        .collect()
}

/// Model-only view of a training checkpoint, for sampling and evaluation.
pub fn load_model(base: &Path) -> Result<Edt<f32>> {
    let (tensors, manifest) = load_tensors::<f32>(base)?;
    let cfg: ModelConfig = match manifest.meta.get("run") {
        Some(run) => {
            let run: RunConfig = serde_json::from_value(run.clone())
                .map_err(|e| EdtError::Manifest(format!("training metadata: {e}")))?;
            run.model_config()?
        }
        None => serde_json::from_value(
            manifest
                .meta
                .get("model")
                .cloned()
                .ok_or_else(|| EdtError::Manifest("checkpoint carries no model config".into()))?,
        )
        .map_err(|e| EdtError::Manifest(format!("model config: {e}")))?,
    };
    load_model_with(base, cfg, tensors)
}

fn load_model_with(base: &Path, cfg: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<Edt<f32>> {
    let mut model = Edt::new(cfg, 0)?;
    let params = tensors
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n.to_string(), t)))
        .collect();
    model
        .params_mut()
        .load(params)
        .map_err(|e| EdtError::Manifest(format!("{}: {e}", base.display())))?;
    Ok(model)
}

/// Loads the parameters of `base` into a model built from `cfg`,
/// reporting every mismatched tensor.
pub fn load_model_as(base: &Path, cfg: ModelConfig) -> Result<Edt<f32>> {
    let (tensors, _) = load_tensors::<f32>(base)?;
    load_model_with(base, cfg, tensors)
}

/// Newest checkpoint in `dir`, by step number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| EdtError::io(dir, e))? {
        let path = entry.map_err(|e| EdtError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let step = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("step_"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path.with_extension("")));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
