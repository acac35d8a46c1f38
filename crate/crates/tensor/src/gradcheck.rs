//! Central finite-difference oracle for [`Graph`] gradients.
//!
//! The oracle only evaluates the forward computation, so it is independent
//! of every backward rule it checks. Derivatives use the five-point central
//! stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose
//! truncation error is O(h⁴).

use crate::{Graph, Real, Result, Tensor, Var};

/// Outcome of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Denominator floor: entries whose gradients are both below this magnitude
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn evaluate<T: Real, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item()?.as_f64())
}

/// Numeric gradient of the scalar `f` with step `h`. At most `per_input`
/// evenly spaced entries of each input are evaluated; the others are NaN.
pub fn numeric_gradient<T: Real, F>(
    inputs: &[Tensor<T>],
    h: f64,
    per_input: usize,
    f: F,
) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let n = work[ti].numel();
        let mut numeric = Tensor::full(work[ti].shape(), f64::NAN);
        let stride = n.div_ceil(per_input.max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = work[ti].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[ei] = T::of(orig.as_f64() + offset);
                evaluate(&work, &f)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[ti].data_mut()[ei] = orig;
            numeric.data_mut()[ei] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
        out.push(numeric);
    }
    Ok(out)
}

/// Compares analytic gradients with numeric ones, skipping NaN entries.
pub fn compare<T: Real>(analytic: &[Tensor<T>], numeric: &[Tensor<f64>]) -> GradCheck {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            if nv.is_nan() {
                continue;
            }
            let av = av.as_f64();
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
                report.analytic = av;
                report.numeric = nv;
            }
        }
    }
    report
}

/// Compares analytic gradients of the scalar `f` against numeric ones for
/// every entry of every input.
pub fn check_gradients<T: Real, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_gradients_sampled(inputs, h, usize::MAX, f)
}

/// Like [`check_gradients`] but compares at most `per_input` evenly spaced
/// entries of each input.
pub fn check_gradients_sampled<T: Real, F>(
    inputs: &[Tensor<T>],
    h: f64,
    per_input: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = crate::grad(inputs, &f)?;
    let numeric = numeric_gradient(inputs, h, per_input, &f)?;
    Ok(compare(&analytic, &numeric))
}
