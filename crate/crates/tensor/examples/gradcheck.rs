//! Reverse-mode gradients of a single-head attention layer checked against
//! five-point finite differences, with the MAC count of the forward pass.
//!
//! `cargo run -p edt-tensor --example gradcheck`

use edt_tensor::gradcheck::check_gradients;
use edt_tensor::{Graph, OpCounter, Rng, Tensor, Var};

fn attention(g: &mut Graph<f64>, v: &[Var]) -> edt_tensor::Result<Var> {
    let (x, wq, wk, wv) = (v[0], v[1], v[2], v[3]);
    let q = g.linear(x, wq, None)?;
    let k = g.linear(x, wk, None)?;
    let val = g.linear(x, wv, None)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 0.5)?;
    let attn = g.softmax(scores)?;
    let y = g.batch_matmul(attn, val, false)?;
    let y = g.layer_norm(y, 1e-6)?;
    let y = g.gelu(y)?;
    g.mean(y)
}

fn main() -> edt_tensor::Result<()> {
    let mut rng = Rng::new(0);
    let inputs = vec![
        Tensor::randn(&[2, 5, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 4], 0.5, &mut rng),
        Tensor::randn(&[4, 4], 0.5, &mut rng),
        Tensor::randn(&[4, 4], 0.5, &mut rng),
    ];

    let (_, macs) = OpCounter::measure(|| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<_, _>>()?;
        attention(&mut g, &vars)
    });
    println!("forward pass: {macs} multiply-accumulates");

    let report = check_gradients(&inputs, 1e-3, attention)?;
    println!(
        "{} entries checked, max relative error {:.3e} (input {}, element {}: {:.6} vs {:.6})",
        report.checked,
        report.max_rel_error,
        report.worst.0,
        report.worst.1,
        report.analytic,
        report.numeric
    );
    Ok(())
}
