//! Draws masks for the two down-sampling modules and shows how masked
//! training splits into a full and a masked loss.
//!
//! `cargo run --release --example masking -- [seed]`

use edt::diffusion::{sample_noised_batch, NoiseSchedule};
use edt::harness::{DatasetSpec, SyntheticDataset};
use edt::masking::{edt_losses_with_masks, sample_stage_masks, MaskGrid};
use edt::tensor::{Graph, Rng};
use edt::{Edt, ModelConfig};

fn show(name: &str, m: &MaskGrid) {
    println!("{name}: {} of {} tokens masked ({:.0}%)", m.count(), m.tokens(), 100.0 * m.fraction());
    for row in m.flags().chunks(m.side()) {
        let line: String = row.iter().map(|&f| if f { '#' } else { '.' }).collect();
        println!("  {line}");
    }
}

fn main() -> edt::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let cfg = ModelConfig::nano();
    let mut rng = Rng::new(seed);
    let masks = sample_stage_masks(&cfg, &cfg.mask, &mut rng)?;
    show("first down-sampling module", &masks.first);
    show("second down-sampling module", &masks.second);

    let model = Edt::<f32>::new(cfg.clone(), seed)?;
    let ds = SyntheticDataset::generate(DatasetSpec::default())?;
    let (x0, classes) = ds.batch::<f32>(0..4);
    let batch = sample_noised_batch(&x0, &classes, &NoiseSchedule::default(), &mut rng, 0.1, cfg.null_class())?;
    // Zero-initialized block gates make both losses coincide before training.
    let mut g = Graph::new();
    let pair = edt_losses_with_masks(&model, &mut g, &batch, &masks)?;
    println!(
        "untrained losses: full {:.4}, masked {:.4}",
        g.value(pair.full).item()?,
        g.value(pair.masked).item()?
    );
    Ok(())
}
