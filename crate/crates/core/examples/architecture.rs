//! Walks the five stages of a preset and traces one forward pass through
//! the nano model, printing the shape after each named module.
//!
//! `cargo run --release --example architecture -- [preset]`

use edt::model::{ForwardOptions, Trace};
use edt::tensor::{Graph, Tensor};
use edt::{Edt, ModelConfig};

fn main() -> edt::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "edt-s".into());
    let cfg = ModelConfig::preset(&preset)?;
    let [r1, r2] = cfg.expansion_ratios();
    println!("{}: latent {:?}, patch {}", cfg.name, cfg.latent_shape(), cfg.patch_size);
    println!("{:>5} {:>6} {:>6} {:>6} {:>6}", "stage", "grid", "tokens", "dim", "blocks");
    for s in 0..5 {
        let side = cfg.stage_sides()[s];
        println!(
            "{s:>5} {:>6} {:>6} {:>6} {:>6}",
            format!("{side}x{side}"),
            cfg.stage_tokens(s),
            cfg.stage_dims[s],
            cfg.stage_blocks[s]
        );
    }
    println!("width expansion in the down-sampling modules: {r1:.3}, {r2:.3}");

    let nano = ModelConfig::nano();
    let model = Edt::<f32>::new(nano.clone(), 0)?;
    println!("\n{}: {} parameters", nano.name, model.parameter_count());
    let [c, h, w] = nano.latent_shape();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, c, h, w]))?;
    let mut trace = Trace::new();
    model.forward_traced(&mut g, x, &[500], &[0], &ForwardOptions::default(), &mut trace)?;
    for (name, v) in &trace {
        println!("  {name:<16} {:?}", g.shape(*v));
    }
    Ok(())
}
