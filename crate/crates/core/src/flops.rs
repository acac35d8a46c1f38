//! Analytical MAC accounting. One multiply-accumulate counts as one FLOP;
//! only matrix products (and the modulation product) are counted.

use std::fmt::Write as _;

use edt_tensor::{OpCounter, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, STAGES};
use crate::error::{EdtError, Result};
use crate::model::Edt;

/// Bound constant of the redesigned drop ratio, `7/16`.
pub const REDESIGN_BOUND: f64 = 0.4375;
/// The same constant as printed, truncated to two digits.
pub const REDESIGN_BOUND_PRINTED: f64 = 0.43;

/// `n` tokens of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub n: u64,
    pub d: u64,
}

impl BlockShape {
    pub fn new(n: u64, d: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(EdtError::Domain(format!("block shape needs n, d >= 1, got ({n}, {d})")));
        }
        Ok(Self { n, d })
    }

    /// `j = n / d`.
    pub fn j(&self) -> f64 {
        self.n as f64 / self.d as f64
    }
}

/// `2n²d + 12nd² + 6d²`.
pub fn block_flops(s: BlockShape) -> u64 {
    let (n, d) = (s.n, s.d);
    2 * n * n * d + 12 * n * d * d + 6 * d * d
}

/// `18d²`: weight matrices of AdaLN (6d²), QKV (3d²), projection (d²) and
/// the feed-forward pair (8d²).
pub fn block_params(d: u64) -> u64 {
    18 * d * d
}

/// Bias scalars of one block, `15d`.
pub fn block_biases(d: u64) -> u64 {
    15 * d
}

fn check_quarter(s: BlockShape) -> Result<()> {
    if !s.n.is_multiple_of(4) {
        return Err(EdtError::Domain(format!("token count {} not divisible by 4", s.n)));
    }
    Ok(())
}

/// Block cost after a conventional 4× token reduction with 2× width:
/// `n²d/4 + 12nd² + 24d²`.
pub fn conventional_after_flops(s: BlockShape) -> Result<u64> {
    check_quarter(s)?;
    let (n, d) = (s.n, s.d);
    Ok(n * n * d / 4 + 12 * n * d * d + 24 * d * d)
}

/// `72d²`.
pub fn conventional_after_params(d: u64) -> u64 {
    72 * d * d
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionalDrop {
    pub rho: f64,
    /// `7j / (8j + 48)`.
    pub bound: f64,
    pub holds: bool,
}

pub fn conventional_drop_ratio(s: BlockShape) -> Result<ConventionalDrop> {
    let f = block_flops(s) as f64;
    let after = conventional_after_flops(s)? as f64;
    let rho = (f - after) / f;
    let j = s.j();
    let bound = 7.0 * j / (8.0 * j + 48.0);
    Ok(ConventionalDrop {
        rho,
        bound,
        holds: rho < bound,
    })
}

/// 4× token reduction with width expansion `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownsampleDesign {
    pub downsample_factor: u64,
    pub r: f64,
}

impl DownsampleDesign {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 1.0 && r < 2.0) {
            return Err(EdtError::Domain(format!("expansion r = {r} must lie in (1, 2)")));
        }
        Ok(Self {
            downsample_factor: 2,
            r,
        })
    }

    /// Accepts the closed interval, for limit checks.
    pub fn new_unchecked(r: f64) -> Self {
        Self {
            downsample_factor: 2,
            r,
        }
    }
}

/// `r·n²d/8 + 3n·r²d² + 6r²d²` in real arithmetic.
pub fn redesigned_after_flops(s: BlockShape, design: DownsampleDesign) -> Result<f64> {
    check_quarter(s)?;
    let (n, d, r) = (s.n as f64, s.d as f64, design.r);
    Ok(r * n * n * d / 8.0 + 3.0 * n * r * r * d * d + 6.0 * r * r * d * d)
}

/// Block cost after the reduction with an integer output width.
pub fn redesigned_after_flops_int(s: BlockShape, d_out: u64) -> Result<u64> {
    check_quarter(s)?;
    Ok(block_flops(BlockShape::new(s.n / 4, d_out)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedesignedDrop {
    pub rho: f64,
    /// `1 − (rj + 24r²)/(16j + 96)`.
    pub approx: f64,
    /// `48(r² + 1) / (n·(16j + 96))`, a bound on `|rho − approx|`.
    pub approx_error_bound: f64,
    /// `1 − 0.4375r`.
    pub bound: f64,
    /// `1 − 0.43r`.
    pub bound_printed: f64,
    /// The bound is asserted only for `j ≥ 1`.
    pub bound_applies: bool,
    pub holds: Option<bool>,
}

pub fn redesigned_drop_ratio(s: BlockShape, design: DownsampleDesign) -> Result<RedesignedDrop> {
    let f = block_flops(s) as f64;
    let rho = (f - redesigned_after_flops(s, design)?) / f;
    let (j, r) = (s.j(), design.r);
    let approx = 1.0 - (r * j + 24.0 * r * r) / (16.0 * j + 96.0);
    let bound = 1.0 - REDESIGN_BOUND * r;
    let bound_applies = j >= 1.0;
    Ok(RedesignedDrop {
        rho,
        approx,
        approx_error_bound: 48.0 * (r * r + 1.0) / (s.n as f64 * (16.0 * j + 96.0)),
        bound,
        bound_printed: 1.0 - REDESIGN_BOUND_PRINTED * r,
        bound_applies,
        holds: bound_applies.then_some(rho > bound),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub stage: usize,
    pub tokens: u64,
    pub dim: u64,
    pub heads: u64,
    pub blocks: u64,
    pub block_flops: u64,
    pub block_params: u64,
    pub flops: u64,
    pub params: u64,
    /// Modulation products of the stage's AMM-flagged blocks.
    pub amm_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFlops {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

/// Effect of one down-sampling module on the block that follows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: BlockShape,
    pub to: BlockShape,
    pub r: f64,
    /// `(F − F')/F` with the configured integer widths.
    pub rho: f64,
    pub conventional: ConventionalDrop,
    pub redesigned: RedesignedDrop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub model: String,
    pub stages: Vec<StageFlops>,
    pub modules: Vec<ModuleFlops>,
    pub transitions: Vec<Transition>,
    pub block_flops: u64,
    pub module_flops: u64,
    pub amm_flops: u64,
    pub total_flops: u64,
    /// Block weight matrices (`Σ 18d²`).
    pub block_params: u64,
    /// Everything else: block biases and all module parameters.
    pub other_params: u64,
    pub total_params: u64,
    /// Instrumented count of one forward pass, when measured.
    pub oracle_flops: Option<u64>,
}

fn linear(name: &str, rows: u64, d_in: u64, d_out: u64) -> ModuleFlops {
    ModuleFlops {
        name: name.into(),
        flops: rows * d_in * d_out,
        params: d_in * d_out + d_out,
    }
}

fn merge(name: &str, parts: &[ModuleFlops], extra_params: u64) -> ModuleFlops {
    ModuleFlops {
        name: name.into(),
        flops: parts.iter().map(|p| p.flops).sum(),
        params: parts.iter().map(|p| p.params).sum::<u64>() + extra_params,
    }
}

/// Per-sample accounting of one forward pass. `with_amm` adds the
/// modulation products of the configured schedule.
pub fn model_flops(cfg: &ModelConfig, with_amm: bool) -> Result<FlopsReport> {
    cfg.validate()?;
    let d: Vec<u64> = cfg.stage_dims.iter().map(|&v| v as u64).collect();
    let n: Vec<u64> = (0..STAGES).map(|s| cfg.stage_tokens(s) as u64).collect();
    let d0 = d[0];
    let schedule = cfg.amm_schedule()?;

    let mut stages = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let shape = BlockShape::new(n[s], d[s])?;
        let blocks = cfg.stage_blocks[s] as u64;
        let heads = cfg.stage_heads[s] as u64;
        let flagged = if with_amm && s >= 3 {
            schedule.stages[s - 3].iter().filter(|&&f| f).count() as u64
        } else {
            0
        };
        stages.push(StageFlops {
            stage: s,
            tokens: n[s],
            dim: d[s],
            heads,
            blocks,
            block_flops: block_flops(shape),
            block_params: block_params(d[s]),
            flops: blocks * block_flops(shape),
            params: blocks * block_params(d[s]),
            amm_flops: flagged * heads * n[s] * n[s],
        });
    }

    let ada = |name: &str, dim: u64| linear(name, 1, dim, 2 * dim);
    let mut modules = vec![
        merge(
            "condition",
            &[linear("time.0", 1, cfg.time_features as u64, d0), linear("time.2", 1, d0, d0)],
            (cfg.class_count as u64 + 1) * d0,
        ),
    ];
    let projections: Vec<ModuleFlops> = (0..STAGES)
        .filter(|&s| d[s] != d0)
        .map(|s| linear(&format!("cond.{s}"), 1, d0, d[s]))
        .collect();
    modules.push(merge("stage conditions", &projections, 0));
    modules.push(merge(
        "patch embed",
        &[linear("patch_embed", n[0], cfg.patch_features() as u64, d0)],
        d0,
    ));
    for i in 0..2 {
        modules.push(merge(
            &format!("down.{i}"),
            &[ada("ada", d[i]), linear("merge", n[i + 1], 4 * d[i], d[i + 1])],
            d[i + 1],
        ));
    }
    for (i, s) in [3usize, 4].into_iter().enumerate() {
        let enc = 4 - s;
        modules.push(merge(&format!("up.{i}"), &[linear("expand", n[s - 1], d[s - 1], 4 * d[s])], 0));
        modules.push(merge(
            &format!("skip.{i}"),
            &[ada("ada", d[enc]), linear("fuse", n[s], d[enc] + d[s], d[s])],
            0,
        ));
    }
    modules.push(merge(
        "final",
        &[ada("ada", d[4]), linear("head", n[4], d[4], cfg.patch_features() as u64)],
        0,
    ));

    let mut transitions = Vec::new();
    for i in 0..2 {
        let from = BlockShape::new(n[i], d[i])?;
        let to = BlockShape::new(n[i + 1], d[i + 1])?;
        let r = d[i + 1] as f64 / d[i] as f64;
        let f = block_flops(from) as f64;
        transitions.push(Transition {
            from,
            to,
            r,
            rho: (f - block_flops(to) as f64) / f,
            conventional: conventional_drop_ratio(from)?,
            redesigned: redesigned_drop_ratio(from, DownsampleDesign::new_unchecked(r))?,
        });
    }

    let block_flops_total: u64 = stages.iter().map(|s| s.flops).sum();
    let module_flops: u64 = modules.iter().map(|m| m.flops).sum();
    let amm_flops: u64 = stages.iter().map(|s| s.amm_flops).sum();
    let block_params_total: u64 = stages.iter().map(|s| s.params).sum();
    let biases: u64 = stages.iter().map(|s| s.blocks * block_biases(s.dim)).sum();
    let other_params = biases + modules.iter().map(|m| m.params).sum::<u64>();
    Ok(FlopsReport {
        model: cfg.name.clone(),
        stages,
        modules,
        transitions,
        block_flops: block_flops_total,
        module_flops,
        amm_flops,
        total_flops: block_flops_total + module_flops + amm_flops,
        block_params: block_params_total,
        other_params,
        total_params: block_params_total + other_params,
        oracle_flops: None,
    })
}

fn fmt_opt(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "yes",
        Some(false) => "NO",
        None => "n/a",
    }
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}", self.model);
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>6} {:>5} {:>6} {:>16} {:>12} {:>16} {:>12}",
            "stage", "n", "d", "heads", "blocks", "F/block", "P/block", "F stage", "AMM"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>6} {:>5} {:>6} {:>16} {:>12} {:>16} {:>12}",
                s.stage, s.tokens, s.dim, s.heads, s.blocks, s.block_flops, s.block_params, s.flops, s.amm_flops
            );
        }
        let _ = writeln!(out, "\n{:<18} {:>16} {:>12}", "module", "F", "P");
        for m in &self.modules {
            let _ = writeln!(out, "{:<18} {:>16} {:>12}", m.name, m.flops, m.params);
        }
        let _ = writeln!(
            out,
            "\n{:<10} {:>7} {:>9} {:>9} {:>11} {:>9} {:>9} {:>11} {:>11} {:>6}",
            "transition", "j", "r", "rho", "conv rho", "conv bnd", "redes rho", "1-0.4375r", "1-0.43r", "holds"
        );
        for (i, t) in self.transitions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<10} {:>7.3} {:>9.4} {:>9.4} {:>11.4} {:>9.4} {:>9.4} {:>11.4} {:>11.4} {:>6}",
                format!("down.{i}"),
                t.from.j(),
                t.r,
                t.rho,
                t.conventional.rho,
                t.conventional.bound,
                t.redesigned.rho,
                t.redesigned.bound,
                t.redesigned.bound_printed,
                fmt_opt(t.redesigned.holds)
            );
        }
        let _ = writeln!(out, "\nblock F   {:>16}", self.block_flops);
        let _ = writeln!(out, "module F  {:>16}", self.module_flops);
        let _ = writeln!(out, "AMM F     {:>16}", self.amm_flops);
        let _ = writeln!(out, "total F   {:>16}  ({:.3} G)", self.total_flops, self.total_flops as f64 / 1e9);
        let _ = writeln!(out, "block P   {:>16}", self.block_params);
        let _ = writeln!(out, "other P   {:>16}", self.other_params);
        let _ = writeln!(out, "total P   {:>16}", self.total_params);
        if let Some(o) = self.oracle_flops {
            let verdict = if o == self.total_flops { "match" } else { "MISMATCH" };
            let _ = writeln!(out, "oracle F  {o:>16}  {verdict}");
        }
        out
    }

    /// One row per stage, module, transition and total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,n,d,heads,blocks,flops,params,rho,bound,holds\n");
        for s in &self.stages {
            let _ = writeln!(
                out,
                "stage,stage.{},{},{},{},{},{},{},,,",
                s.stage, s.tokens, s.dim, s.heads, s.blocks, s.flops + s.amm_flops, s.params
            );
        }
        for m in &self.modules {
            let _ = writeln!(out, "module,{},,,,,{},{},,,", m.name, m.flops, m.params);
        }
        for (i, t) in self.transitions.iter().enumerate() {
            let _ = writeln!(
                out,
                "conventional,down.{i},{},{},,,,,{},{},{}",
                t.from.n, t.from.d, t.conventional.rho, t.conventional.bound, t.conventional.holds
            );
            let holds = t.redesigned.holds.map(|h| h.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "redesigned,down.{i},{},{},,,,,{},{},{holds}",
                t.from.n, t.from.d, t.redesigned.rho, t.redesigned.bound
            );
        }
        let _ = writeln!(out, "total,model,,,,,{},{},,,", self.total_flops, self.total_params);
        if let Some(o) = self.oracle_flops {
            let _ = writeln!(out, "oracle,model,,,,,{o},,,,{}", o == self.total_flops);
        }
        out
    }
}

/// Instrumented MAC count of one single-sample forward pass through a
/// freshly built model; `with_amm` attaches the configured matrices.
pub fn oracle_forward_macs(cfg: &ModelConfig, with_amm: bool) -> Result<u64> {
    let mut model = Edt::<f32>::new(cfg.clone(), 0)?;
    if with_amm {
        model.attach_configured_amm()?;
    }
    let [c, h, w] = cfg.latent_shape();
    let x = Tensor::zeros(&[1, c, h, w]);
    let (out, macs) = OpCounter::measure(|| model.predict(&x, &[1], &[0]));
    out?;
    Ok(macs)
}

/// [`model_flops`] with the oracle column filled in.
pub fn model_flops_with_oracle(cfg: &ModelConfig, with_amm: bool) -> Result<FlopsReport> {
    let mut report = model_flops(cfg, with_amm)?;
    report.oracle_flops = Some(oracle_forward_macs(cfg, with_amm)?);
    Ok(report)
}
