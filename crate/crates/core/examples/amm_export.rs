//! Builds a modulation matrix, prints its centre row as a grid and writes
//! it as CSV plus a JSON parameter file.
//!
//! `cargo run --example amm_export -- [side] [scale] [out.csv]`

use std::path::PathBuf;

use edt::amm::{build_amm, AmmParams, GridGeometry};

fn main() -> edt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let side: usize = args.first().map_or(Ok(8), |s| s.parse()).expect("side");
    let scale: f64 = args.get(1).map_or(Ok(0.5), |s| s.parse()).expect("scale");
    let out = args.get(2).map_or_else(|| std::env::temp_dir().join("amm.csv"), PathBuf::from);

    let g = GridGeometry::new(side)?;
    let p = AmmParams::new(g, scale, None)?;
    let m = build_amm(g, p);
    println!(
        "N={side}  k={scale}  d_max={:.4}  T={:.4}  R={:.4}",
        p.d_max, p.period, p.radius
    );

    let centre = g.index(side / 2, side / 2);
    println!("row of token {centre}:");
    for x in 0..side {
        let line: Vec<String> = (0..side).map(|y| format!("{:6.3}", m.get(centre, g.index(x, y)))).collect();
        println!("  {}", line.join(" "));
    }

    m.export(&out)?;
    println!("wrote {} and {}", out.display(), edt::amm::metadata_path(&out).display());
    Ok(())
}
