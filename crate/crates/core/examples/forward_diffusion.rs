//! Noise schedule and forward process: prints ᾱ_t and the empirical
//! signal/noise mix of noised data, then checks that x₀ is recovered from
//! the true noise.
//!
//! `cargo run --example forward_diffusion`

use edt::diffusion::{ddim_timesteps, forward_diffuse, recover_x0, NoiseSchedule};
use edt::harness::{DatasetSpec, SyntheticDataset};
use edt::tensor::{Rng, Tensor};

fn main() -> edt::Result<()> {
    let sched = NoiseSchedule::default();
    let ds = SyntheticDataset::generate(DatasetSpec::default())?;
    let (x0, _) = ds.batch::<f64>(0..64);
    let mut rng = Rng::new(1);
    let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
    let n = x0.shape()[0];

    println!("{:>5} {:>10} {:>12} {:>10}", "t", "alpha_bar", "corr(x_t,x0)", "max|err|");
    for t in [1, 50, 250, 500, 750, 1000] {
        let ts = vec![t; n];
        let xt = forward_diffuse(&x0, &ts, &eps, &sched)?;
        let back = recover_x0(&xt, &ts, &eps, &sched)?;
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{t:>5} {:>10.5} {:>12.4} {:>10.2e}", sched.alpha_bar(t), corr(xt.data(), x0.data()), err);
    }
    println!("DDIM grid for 10 steps: {:?}", ddim_timesteps(sched.steps(), 10));
    Ok(())
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
