//! Trains the nano model on the synthetic shapes and prints the loss trend.
//!
//! cargo run --release --example train_toy -- [iterations] [out_dir]

use std::time::Instant;

use edt::harness::train::{RunConfig, Trainer};
use edt::ModelConfig;

fn main() -> edt::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let out = args.next().unwrap_or_else(|| "target/toy-run".into());
    let mut run = RunConfig::new(ModelConfig::nano(), iterations, out);
    run.checkpoint_every = (iterations / 4).max(1);
    let mut trainer = Trainer::new(run)?;
    let start = Instant::now();
    let report = (iterations / 10).max(1);
    trainer.run(|log| {
        if log.iteration % report == 0 {
            println!(
                "{:>6}  l_full {:.4}  l_masked {:.4}  ema {:.4}  lr {:.2e}  {:.1}s",
                log.iteration,
                log.l_full,
                log.l_masked.unwrap_or(f64::NAN),
                log.ema_full,
                log.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("log: {}", trainer.run_config().log_path().display());
    Ok(())
}
