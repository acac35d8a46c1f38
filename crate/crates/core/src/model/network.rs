use std::sync::Arc;

use edt_tensor::{Graph, Real, Rng, Tensor, TensorError, Var};

use super::block::EdtBlock;
use super::layers::{patchify_index, sincos_2d, timestep_features, unpatchify_index, Init, Linear};
use super::modules::{substitute, Downsample, FinalLayer, LongSkip, MaskHook, Upsample};
use super::params::ParamStore;
use crate::amm::{cached_amm, AmmParams, GridGeometry, ModulationMatrix, PlacementSchedule};
use crate::config::{ModelConfig, STAGES};
use crate::error::{EdtError, Result};
use crate::masking::{MaskGrid, StageMasks};

/// Per-call switches of [`Edt::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// Masks for the two down-sampling modules.
    pub stage_masks: Option<&'a StageMasks>,
    /// Mask on the patch-embedded input grid.
    pub input_mask: Option<&'a MaskGrid>,
    /// Use the attached modulation matrices, if any.
    pub amm: bool,
    /// Adds seeded noise to masked rows before substitution.
    pub scramble: Option<u64>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            stage_masks: None,
            input_mask: None,
            amm: true,
            scramble: None,
        }
    }
}

/// Named activations recorded during a forward pass, in execution order.
pub type Trace = Vec<(String, Var)>;

/// Inference-time modulation state for the two decoder stages.
#[derive(Clone, Debug)]
pub struct AttachedAmm<T> {
    pub schedule: PlacementSchedule,
    pub matrices: [Arc<ModulationMatrix>; 2],
    factors: [Arc<[T]>; 2],
}

#[derive(Clone, Debug)]
pub struct Edt<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    time_in: Linear,
    time_out: Linear,
    class_table: usize,
    cond_proj: Vec<Option<Linear>>,
    patch_embed: Linear,
    input_mask_token: usize,
    stages: Vec<Vec<EdtBlock>>,
    down: [Downsample; 2],
    up: [Upsample; 2],
    skip: [LongSkip; 2],
    final_layer: FinalLayer,
    amm: Option<AttachedAmm<T>>,
}

fn into2<M>(v: Vec<M>) -> [M; 2] {
    v.try_into().unwrap_or_else(|_| unreachable!("two modules per phase"))
}

fn record(trace: &mut Option<&mut Trace>, name: impl Into<String>, v: Var) {
    if let Some(t) = trace.as_mut() {
        t.push((name.into(), v));
    }
}

impl<T: Real> Edt<T> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = config.stage_dims;
        let d0 = d[0];
        let time_in = Linear::new(&mut store, "time.0", config.time_features, d0, Init::Normal(0.02), &mut rng)?;
        let time_out = Linear::new(&mut store, "time.2", d0, d0, Init::Normal(0.02), &mut rng)?;
        let class_table = store.add(
            "class_table",
            Init::Normal(0.02).tensor(&[config.class_count + 1, d0], &mut rng),
        )?;
        let mut cond_proj = Vec::with_capacity(STAGES);
        for (s, &ds) in d.iter().enumerate() {
            cond_proj.push(if ds == d0 {
                None
            } else {
                Some(Linear::new(&mut store, &format!("cond.{s}"), d0, ds, Init::Xavier, &mut rng)?)
            });
        }
        let patch_embed = Linear::new(&mut store, "patch_embed", config.patch_features(), d0, Init::Xavier, &mut rng)?;
        let input_mask_token = store.add("input_mask_token", Tensor::zeros(&[d0]))?;

        let mut stages = Vec::with_capacity(STAGES);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut skip = Vec::new();
        for s in 0..STAGES {
            match s {
                1 | 2 => down.push(Downsample::new(&mut store, &format!("down.{}", s - 1), d[s - 1], d[s], &mut rng)?),
                3 | 4 => {
                    up.push(Upsample::new(&mut store, &format!("up.{}", s - 3), d[s - 1], d[s], &mut rng)?);
                    let enc = 4 - s;
                    skip.push(LongSkip::new(&mut store, &format!("skip.{}", s - 3), d[enc], d[s], &mut rng)?);
                }
                _ => {}
            }
            let blocks = (0..config.stage_blocks[s])
                .map(|i| EdtBlock::new(&mut store, &format!("stage.{s}.{i}"), d[s], config.stage_heads[s], &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let final_layer = FinalLayer::new(&mut store, "final", d[4], config.patch_features(), &mut rng)?;
        Ok(Self {
            config,
            store,
            time_in,
            time_out,
            class_table,
            cond_proj,
            patch_embed,
            input_mask_token,
            stages,
            down: into2(down),
            up: into2(up),
            skip: into2(skip),
            final_layer,
            amm: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &EdtBlock> {
        self.stages.iter().flatten()
    }

    /// Scalars in the blocks' weight matrices (`18d²` per block).
    pub fn block_weight_count(&self) -> usize {
        self.blocks().map(|b| b.weight_count(&self.store)).sum()
    }

    pub fn downsample(&self, i: usize) -> &Downsample {
        &self.down[i]
    }

    pub fn upsample(&self, i: usize) -> &Upsample {
        &self.up[i]
    }

    pub fn long_skip(&self, i: usize) -> &LongSkip {
        &self.skip[i]
    }

    pub fn amm(&self) -> Option<&AttachedAmm<T>> {
        self.amm.as_ref()
    }

    /// Attaches modulation matrices for both decoder grids. Parameters are
    /// not touched.
    pub fn attach_amm(&mut self, scale: f64, radius: Option<f64>, schedule: PlacementSchedule) -> Result<()> {
        schedule.check(&self.config.decoder_blocks())?;
        let sides = self.config.stage_sides();
        let build = |side: usize| -> Result<Arc<ModulationMatrix>> {
            let g = GridGeometry::new(side)?;
            Ok(cached_amm(AmmParams::new(g, scale, radius)?))
        };
        let matrices = [build(sides[3])?, build(sides[4])?];
        let factors = [matrices[0].cast::<T>().into(), matrices[1].cast::<T>().into()];
        self.amm = Some(AttachedAmm {
            schedule,
            matrices,
            factors,
        });
        Ok(())
    }

    /// Attaches using the configured scale, radius and schedule.
    pub fn attach_configured_amm(&mut self) -> Result<()> {
        let schedule = self.config.amm_schedule()?;
        let (scale, radius) = (self.config.amm.scale, self.config.amm.radius);
        self.attach_amm(scale, radius, schedule)
    }

    pub fn detach_amm(&mut self) -> Option<AttachedAmm<T>> {
        self.amm.take()
    }

    fn check_inputs(&self, g: &Graph<T>, x: Var, t: &[usize], classes: &[usize]) -> Result<usize> {
        let [c, h, w] = self.config.latent_shape();
        let b = t.len();
        if g.shape(x) != [b, c, h, w] {
            return Err(TensorError::Shape {
                op: "forward",
                detail: format!("input {:?}, expected [{b}, {c}, {h}, {w}]", g.shape(x)),
            }
            .into());
        }
        if classes.len() != b {
            return Err(EdtError::Argument(format!("{} classes for batch of {b}", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&y| y > self.config.class_count) {
            return Err(EdtError::Argument(format!("class {bad} out of range")));
        }
        Ok(b)
    }

    /// `silu` of the condition vector at every stage width.
    fn conditions(&self, g: &mut Graph<T>, t: &[usize], classes: &[usize]) -> Result<Vec<Var>> {
        let st = &self.store;
        let feats = g.input(timestep_features(t, self.config.time_features))?;
        let h = self.time_in.forward(g, st, feats)?;
        let h = g.silu(h)?;
        let temb = self.time_out.forward(g, st, h)?;
        let table = g.param(self.class_table, st.get(self.class_table))?;
        let yemb = g.embedding(table, classes)?;
        let c = g.add(temb, yemb)?;
        self.cond_proj
            .iter()
            .map(|p| {
                let cs = match p {
                    Some(lin) => lin.forward(g, st, c)?,
                    None => c,
                };
                Ok(g.silu(cs)?)
            })
            .collect()
    }

    fn run_stage(
        &self,
        g: &mut Graph<T>,
        s: usize,
        mut x: Var,
        cond: Var,
        opts: &ForwardOptions<'_>,
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        for (i, block) in self.stages[s].iter().enumerate() {
            let amm = match (&self.amm, s) {
                (Some(a), 3 | 4) if opts.amm && a.schedule.flag(s - 3, i) => Some(&a.factors[s - 3]),
                _ => None,
            };
            x = block.forward(g, &self.store, x, cond, amm)?;
            record(trace, format!("stage.{s}.{i}"), x);
        }
        Ok(x)
    }

    /// Noise prediction for `x` (`[B, C, H, W]`) at timesteps `t` and classes
    /// `classes`; class index `class_count` is the null class.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, t: &[usize], classes: &[usize], opts: &ForwardOptions<'_>) -> Result<Var> {
        self.forward_impl(g, x, t, classes, opts, None)
    }

    /// [`Edt::forward`] that also records every module and block output.
    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        x: Var,
        t: &[usize],
        classes: &[usize],
        opts: &ForwardOptions<'_>,
        trace: &mut Trace,
    ) -> Result<Var> {
        self.forward_impl(g, x, t, classes, opts, Some(trace))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<T>,
        x: Var,
        t: &[usize],
        classes: &[usize],
        opts: &ForwardOptions<'_>,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let b = self.check_inputs(g, x, t, classes)?;
        let cfg = &self.config;
        let st = &self.store;
        let (ch, size, p) = (cfg.latent_channels, cfg.latent_size, cfg.patch_size);
        let n0 = cfg.stage_tokens(0);
        let conds = self.conditions(g, t, classes)?;

        let patches = g.gather(x, patchify_index(b, ch, size, p).into(), &[b, n0, cfg.patch_features()])?;
        let mut h = self.patch_embed.forward(g, st, patches)?;
        if let Some(mask) = opts.input_mask {
            mask.check_tokens(n0)?;
            let token = g.param(self.input_mask_token, st.get(self.input_mask_token))?;
            let hook = MaskHook {
                mask: mask.flags(),
                scramble: opts.scramble,
            };
            h = substitute(g, h, token, &hook)?;
        }
        let pe = g.input(sincos_2d(cfg.grid_side(), cfg.stage_dims[0]))?;
        h = g.add_broadcast(h, pe)?;
        record(&mut trace, "embed", h);

        let mut skips = Vec::with_capacity(2);
        for s in 0..3 {
            if s > 0 {
                let hook = match opts.stage_masks {
                    Some(m) => {
                        let grid = if s == 1 { &m.first } else { &m.second };
                        grid.check_tokens(cfg.stage_tokens(s))?;
                        Some(MaskHook {
                            mask: grid.flags(),
                            scramble: opts.scramble.map(|v| v.wrapping_add(s as u64)),
                        })
                    }
                    None => None,
                };
                h = self.down[s - 1].forward(g, st, h, conds[s - 1], hook.as_ref())?;
                record(&mut trace, format!("down.{}", s - 1), h);
            }
            h = self.run_stage(g, s, h, conds[s], opts, &mut trace)?;
            if s < 2 {
                skips.push(h);
            }
        }
        #[allow(clippy::needless_range_loop)]
        for s in 3..5 {
            h = self.up[s - 3].forward(g, st, h)?;
            record(&mut trace, format!("up.{}", s - 3), h);
            let enc = skips.pop().expect("one skip per decoder stage");
            h = self.skip[s - 3].forward(g, st, enc, h, conds[s])?;
            record(&mut trace, format!("skip.{}", s - 3), h);
            h = self.run_stage(g, s, h, conds[s], opts, &mut trace)?;
        }
        let out = self.final_layer.forward(g, st, h, conds[4])?;
        let y = g.gather(out, unpatchify_index(b, ch, size, p).into(), &[b, ch, size, size])?;
        record(&mut trace, "output", y);
        Ok(y)
    }

    /// Inference-mode prediction outside any caller-provided graph.
    pub fn predict(&self, x: &Tensor<T>, t: &[usize], classes: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let y = self.forward(&mut g, xv, t, classes, &ForwardOptions::default())?;
        Ok(g.value(y).clone())
    }
}
