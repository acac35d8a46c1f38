//! Analytic FLOPs and parameter accounting for a preset, optionally checked
//! against an instrumented forward pass, plus the down-sampling drop ratios.
//!
//! `cargo run --release --example flops_report -- [preset] [--oracle]`

use edt::flops::{conventional_drop_ratio, model_flops, model_flops_with_oracle, redesigned_drop_ratio, BlockShape, DownsampleDesign};
use edt::ModelConfig;

fn main() -> edt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.iter().find(|a| !a.starts_with("--")).map_or("nano", String::as_str);
    let oracle = args.iter().any(|a| a == "--oracle");
    let cfg = ModelConfig::preset(preset)?;

    let report = if oracle {
        model_flops_with_oracle(&cfg, false)?
    } else {
        model_flops(&cfg, false)?
    };
    print!("{}", report.to_table());
    let with_amm = model_flops(&cfg, true)?;
    println!("modulation adds {} MACs per forward pass", with_amm.amm_flops);

    println!("\n{:>6} {:>6} {:>8} {:>10} {:>10} {:>10}", "n", "d", "j", "rho_conv", "rho_r1.25", "bound");
    for (n, d) in [(256, 256), (256, 384), (1024, 256), (64, 512)] {
        let s = BlockShape::new(n, d)?;
        let conv = conventional_drop_ratio(s)?;
        let red = redesigned_drop_ratio(s, DownsampleDesign::new(1.25)?)?;
        println!(
            "{n:>6} {d:>6} {:>8.3} {:>10.4} {:>10.4} {:>10.4}",
            s.j(),
            conv.rho,
            red.rho,
            red.bound
        );
    }
    Ok(())
}
