//! Generates a few items of the synthetic class-conditional dataset and
//! writes them as PGM images.
//!
//! `cargo run --example dataset_gen -- [per_class] [out_dir]`

use std::path::PathBuf;

use edt::harness::image::Gray;
use edt::harness::{DatasetSpec, SyntheticDataset};

fn main() -> edt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_class: usize = args.first().map_or(Ok(2), |s| s.parse()).expect("per_class");
    let out = args.get(1).map_or_else(|| std::env::temp_dir().join("edt-dataset"), PathBuf::from);
    std::fs::create_dir_all(&out).expect("output directory");

    let ds = SyntheticDataset::generate(DatasetSpec::default())?;
    let [c, h, w] = ds.item_shape();
    println!(
        "{} classes of {c}x{h}x{w}; min class-mean separation {:.4}",
        ds.spec().class_count,
        ds.min_mean_separation()
    );
    for class in 0..ds.spec().class_count {
        let batch = ds.class_batch::<f32>(class, per_class, 0);
        let item = c * h * w;
        for i in 0..per_class {
            let vals: Vec<f64> = batch.data()[i * item..(i + 1) * item].iter().map(|&v| v as f64).collect();
            let path = out.join(format!("class{class}_{i}.pgm"));
            Gray::from_channels(&vals, c, h, w)?.save(&path)?;
        }
    }
    println!("images in {}", out.display());
    Ok(())
}
