//! Samples every class from a checkpoint and scores it against held-out
//! synthetic references, next to an untrained model of the same shape.
//!
//! cargo run --release --example sample_eval -- CHECKPOINT [per_class] [steps] [cfg_scale]

use std::path::PathBuf;

use edt::diffusion::NoiseSchedule;
use edt::harness::data::{DatasetSpec, SyntheticDataset};
use edt::harness::eval::{class_mmd_matrix, diagonal_wins, mmd_with_bandwidth, reference_bandwidth, rows};
use edt::harness::sample::{generate, SampleOptions};
use edt::harness::train::load_model;
use edt::Edt;

fn main() -> edt::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().expect("checkpoint base path"));
    let per_class: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let cfg_scale: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let model = load_model(&ckpt)?;
    let k = model.config().class_count;
    let data = SyntheticDataset::generate(DatasetSpec::default())?;
    let opts = SampleOptions {
        classes: (0..k).flat_map(|c| std::iter::repeat_n(c, per_class)).collect(),
        steps,
        cfg_scale,
        seed: 7,
        amm: false,
        threads: 0,
    };
    let sched = NoiseSchedule::default();
    let trained = generate(&model, &sched, &opts)?;
    let untrained = generate(&Edt::new(model.config().clone(), 0)?, &sched, &opts)?;

    let refs: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|c| {
            let x = data.class_batch::<f32>(c, 2 * per_class, 1000);
            rows(x.data(), 2 * per_class)
        })
        .collect();
    let all_refs: Vec<Vec<f64>> = refs.concat();
    let sigma = reference_bandwidth(&all_refs)?;
    let gen = rows(trained.data(), opts.classes.len());
    let base = rows(untrained.data(), opts.classes.len());
    let m_trained = mmd_with_bandwidth(&gen, &all_refs, sigma)?.mmd;
    let m_untrained = mmd_with_bandwidth(&base, &all_refs, sigma)?.mmd;
    println!("bandwidth {sigma:.4}");
    println!("MMD trained {m_trained:.4}  untrained {m_untrained:.4}  ratio {:.2}", m_untrained / m_trained);

    let by_class: Vec<Vec<Vec<f64>>> = gen.chunks(per_class).map(|c| c.to_vec()).collect();
    let m = class_mmd_matrix(&by_class, &refs, sigma)?;
    for (c, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("class {c}: {}", cells.join(" "));
    }
    println!("classes closest to their own references: {}/{k}", diagonal_wins(&m));
    Ok(())
}
