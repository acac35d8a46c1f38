use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edt::amm::{build_amm, AmmParams, GridGeometry};
use edt::config::{read_json, write_json};
use edt::diffusion::{NoiseSchedule, TimestepSampling};
use edt::flops::{model_flops, model_flops_with_oracle};
use edt::harness::checkpoint::{load_tensors, save_tensors};
use edt::harness::eval::{evaluate, rows};
use edt::harness::image::Gray;
use edt::harness::sample::{generate, read_samples, thread_count, write_samples, SampleOptions};
use edt::harness::train::{latest_checkpoint, load_model, RunConfig, Strategy, Trainer};
use edt::harness::{DatasetSpec, SyntheticDataset};
use edt::tensor::Tensor;
use edt::{EdtError, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "edt", version, about = "Efficient diffusion transformer toolkit")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation and sampling (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset.
    Train(TrainArgs),
    /// Draw class-conditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated samples with reference data.
    Eval(EvalArgs),
    /// Analytic FLOPs and parameter table.
    Flops(FlopsArgs),
    /// Attention modulation matrix tools.
    Amm {
        #[command(subcommand)]
        command: AmmCommand,
    },
    /// Synthetic dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset or model JSON, overriding the run file.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    p_uncond: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long, value_enum)]
    timestep_sampling: Option<TimestepSampling>,
    #[arg(long)]
    mdt_ratio: Option<f64>,
    #[arg(long)]
    train_items: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint base path, or `latest` in the run's
    /// checkpoint directory.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint base path (without extension).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling options (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Classes to sample; repeat or separate with commas.
    #[arg(long = "class", value_delimiter = ',')]
    classes: Vec<usize>,
    /// Items per listed class.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_enum)]
    amm: Option<Toggle>,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `sample`.
    #[arg(long)]
    generated: PathBuf,
    /// Dataset archive from `dataset gen`; drawn from --data otherwise.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Dataset spec (JSON) for drawing references.
    #[arg(long)]
    data: Option<PathBuf>,
    /// References drawn per generated item of each class.
    #[arg(long, default_value_t = 1)]
    ref_factor: usize,
    /// Report path (JSON); printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
struct FlopsArgs {
    /// Model JSON; --preset selects a built-in one instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "edt-s")]
    preset: String,
    /// Also count MACs of an instrumented forward pass.
    #[arg(long)]
    oracle: bool,
    /// Include the modulation products of the configured schedule.
    #[arg(long)]
    amm: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Subcommand)]
enum AmmCommand {
    /// Write the N²×N² matrix as CSV plus a JSON metadata sidecar.
    Export {
        #[arg(long)]
        grid: usize,
        #[arg(long, default_value_t = edt::amm::DEFAULT_SCALE)]
        scale: f64,
        /// Cutoff radius; defaults to √((N − 1)² + 4).
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Materialize items as a tensor archive and optional PGM dumps.
    Gen {
        /// Dataset spec (JSON); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        class_count: Option<usize>,
        #[arg(long)]
        first_index: Option<usize>,
        #[arg(long)]
        pgm: bool,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (seed, threads) = (cli.seed, cli.threads);
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Sample(a) => sample(a, seed, threads),
        Command::Eval(a) => eval(a, seed, threads),
        Command::Flops(a) => flops(a),
        Command::Amm {
            command: AmmCommand::Export { grid, scale, radius, out },
        } => amm_export(grid, scale, radius, &out),
        Command::Dataset {
            command:
                DatasetCommand::Gen {
                    config,
                    count,
                    class_count,
                    first_index,
                    pgm,
                    out,
                },
        } => dataset_gen(config, count, class_count, first_index.unwrap_or(0), pgm, &out, seed, threads),
    }
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(from) => {
            let base = if from == "latest" {
                let run = run_config(&a, seed)?;
                latest_checkpoint(&run.checkpoint_dir())?
                    .ok_or_else(|| EdtError::Argument(format!("no checkpoints in {}", run.checkpoint_dir().display())))?
            } else {
                PathBuf::from(from)
            };
            Trainer::resume(&base, a.iterations)?
        }
        None => Trainer::new(run_config(&a, seed)?)?,
    };
    let total = trainer.run_config().iterations;
    let every = (total / 20).max(1);
    let saved = trainer.run(|log| {
        if log.iteration % every == 0 || log.iteration == total {
            println!(
                "iter {:>7}  l_full {:.5}  l_masked {}  smoothed {:.5}  lr {:.3e}",
                log.iteration,
                log.l_full,
                log.l_masked.map_or("-".into(), |v| format!("{v:.5}")),
                log.ema_full,
                log.lr
            );
        }
    })?;
    println!("loss log: {}", trainer.run_config().log_path().display());
    if let Some(last) = saved.last() {
        println!("checkpoint: {}", last.display());
    }
    Ok(())
}

fn run_config(a: &TrainArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(ModelConfig::nano(), 1000, "runs/nano"),
    };
    if let Some(m) = &a.model {
        run.model = edt::harness::train::ModelRef::Inline(Box::new(
            edt::harness::train::ModelRef::Named(m.clone()).resolve(Path::new("."))?,
        ));
    }
    let opt = &mut run.optim;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(opt.lr_start, a.lr_start);
    set!(opt.lr_end, a.lr_end);
    set!(run.iterations, a.iterations);
    set!(run.batch_size, a.batch_size);
    set!(run.p_uncond, a.p_uncond);
    set!(run.strategy, a.strategy);
    set!(run.timestep_sampling, a.timestep_sampling);
    set!(run.mdt_ratio, a.mdt_ratio);
    set!(run.train_items, a.train_items);
    set!(run.checkpoint_every, a.checkpoint_every);
    set!(run.output_dir, a.out.clone());
    set!(run.seed, seed);
    Ok(run)
}

fn sample(a: SampleArgs, seed: Option<u64>, threads: usize) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut opts = match &a.config {
        Some(p) => read_json::<SampleOptions>(p)?,
        None => SampleOptions::default(),
    };
    if !a.classes.is_empty() {
        opts.classes = a.classes.iter().flat_map(|&c| std::iter::repeat_n(c, a.count)).collect();
    }
    if let Some(s) = a.steps {
        opts.steps = s;
    }
    if let Some(w) = a.cfg_scale {
        opts.cfg_scale = w;
    }
    if let Some(t) = a.amm {
        opts.amm = t == Toggle::On;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    opts.threads = threads;
    let sched = NoiseSchedule::default();
    let samples = generate(&model, &sched, &opts)?;
    let paths = write_samples(&a.out, &samples, &opts)?;
    println!("{} samples written to {}", paths.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, seed: Option<u64>, threads: usize) -> Result<()> {
    let (gen, opts) = read_samples(&a.generated)?;
    let n = gen.shape()[0];
    let generated = rows(gen.data(), n);
    let (reference, ref_classes) = match &a.reference {
        Some(base) => {
            let (mut t, m) = load_tensors::<f32>(base)?;
            let labels: Vec<usize> = serde_json::from_value(m.meta["labels"].clone())
                .map_err(|e| EdtError::Manifest(format!("dataset labels: {e}")))?;
            let (_, x) = t.pop().ok_or_else(|| EdtError::Manifest("empty dataset archive".into()))?;
            (rows(x.data(), labels.len()), labels)
        }
        None => {
            let mut spec = match &a.data {
                Some(p) => read_json::<DatasetSpec>(p)?,
                None => DatasetSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = SyntheticDataset::generate(spec)?;
            let k = ds.spec().class_count;
            let mut idx = Vec::new();
            for c in 0..k {
                let want = opts.classes.iter().filter(|&&x| x == c).count() * a.ref_factor;
                idx.extend((0..want).map(|i| c + (i + 1_000_000) * k));
            }
            let (x, labels) = materialize(&ds, &idx, threads)?;
            (rows(x.data(), labels.len()), labels)
        }
    };
    let report = evaluate(&generated, &opts.classes, &reference, &ref_classes)?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| EdtError::Argument(e.to_string()))?
        ),
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::preset(&a.preset)?,
    };
    let report = if a.oracle {
        model_flops_with_oracle(&cfg, a.amm)?
    } else {
        model_flops(&cfg, a.amm)?
    };
    match a.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn amm_export(grid: usize, scale: f64, radius: Option<f64>, out: &Path) -> Result<()> {
    let g = GridGeometry::new(grid)?;
    let m = build_amm(g, AmmParams::new(g, scale, radius)?);
    m.export(out)?;
    let p = m.params();
    println!(
        "N={} k={} T={} f={} R={} -> {}",
        p.side,
        p.scale,
        p.period,
        p.frequency,
        p.radius,
        out.display()
    );
    Ok(())
}

/// Items `indices` generated in parallel chunks, stacked in order.
fn materialize(ds: &SyntheticDataset, indices: &[usize], threads: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(EdtError::Argument("no items requested".into()));
    }
    let workers = thread_count(threads).min(indices.len());
    let chunk = indices.len().div_ceil(workers);
    let parts: Vec<(Tensor<f32>, Vec<usize>)> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|idx| s.spawn(move || ds.batch::<f32>(idx.iter().copied())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("dataset worker panicked")).collect()
    });
    let [c, h, w] = ds.item_shape();
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (t, l) in parts {
        data.extend(t.into_data());
        labels.extend(l);
    }
    Ok((Tensor::new(&[labels.len(), c, h, w], data)?, labels))
}

#[allow(clippy::too_many_arguments)]
fn dataset_gen(
    config: Option<PathBuf>,
    count: usize,
    class_count: Option<usize>,
    first: usize,
    pgm: bool,
    out: &Path,
    seed: Option<u64>,
    threads: usize,
) -> Result<()> {
    let mut spec = match &config {
        Some(p) => read_json::<DatasetSpec>(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(k) = class_count {
        spec.class_count = k;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = SyntheticDataset::generate(spec)?;
    let indices: Vec<usize> = (first..first + count).collect();
    let (x, labels) = materialize(&ds, &indices, threads)?;
    fs::create_dir_all(out).map_err(|e| EdtError::Argument(format!("{}: {e}", out.display())))?;
    let meta = serde_json::json!({
        "spec": ds.spec(),
        "first_index": first,
        "labels": labels,
        "min_mean_separation": ds.min_mean_separation(),
    });
    save_tensors(&out.join("data"), &[("images".into(), &x)], meta)?;
    if pgm {
        let [c, h, w] = ds.item_shape();
        let item = c * h * w;
        for (i, &label) in labels.iter().enumerate() {
            let vals: Vec<f64> = x.data()[i * item..(i + 1) * item].iter().map(|&v| v as f64).collect();
            Gray::from_channels(&vals, c, h, w)?.save(&out.join(format!("item_{:06}_class{label}.pgm", first + i)))?;
        }
    }
    println!(
        "{count} items (min class-mean separation {:.4}) written to {}",
        ds.min_mean_separation(),
        out.join("data").display()
    );
    Ok(())
}
