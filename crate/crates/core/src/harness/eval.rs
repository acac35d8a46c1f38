//! Kernel two-sample statistics between generated and reference sets.

use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(EdtError::Argument("MMD needs two non-empty sets".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(EdtError::Argument("MMD sets have mixed extents".into()));
    }
    Ok(dim)
}

/// Median pairwise distance over the pooled set; 1 if every point
/// coincides.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_sets(x, y)?;
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    Ok(if med > 0.0 { med } else { 1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    /// `√max(MMD², 0)`.
    pub mmd: f64,
    /// Unbiased estimate; may be slightly negative.
    pub mmd2: f64,
    pub bandwidth: f64,
}

/// Unbiased MMD with `k(a, b) = exp(−‖a − b‖² / (2σ²))`. Singleton sets
/// fall back to including the diagonal for their own term.
pub fn mmd_with_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<Mmd> {
    check_sets(x, y)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(EdtError::Argument(format!("kernel bandwidth {sigma} must be positive")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        if n == 1 {
            return 1.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()) as f64;
    let mmd2 = within(x) + within(y) - 2.0 * cross;
    Ok(Mmd {
        mmd: mmd2.max(0.0).sqrt(),
        mmd2,
        bandwidth: sigma,
    })
}

/// [`mmd_with_bandwidth`] at the median-heuristic bandwidth.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Mmd> {
    let sigma = median_bandwidth(x, y)?;
    mmd_with_bandwidth(x, y, sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub generated: usize,
    pub reference: usize,
    /// L2 distance between the per-pixel mean images.
    pub mean_distance: f64,
    /// L2 distance between the per-pixel standard-deviation images.
    pub std_distance: f64,
    pub mmd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mmd: Mmd,
    pub generated: usize,
    pub reference: usize,
    pub per_class: Vec<ClassStats>,
}

fn moments(s: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = s.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for v in s {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for v in s {
        for ((q, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
            *q += (x - m) * (x - m) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Overall MMD plus per-class statistics for labelled sets. Classes absent
/// from either side are skipped.
pub fn evaluate(generated: &[Vec<f64>], gen_classes: &[usize], reference: &[Vec<f64>], ref_classes: &[usize]) -> Result<EvalReport> {
    let dim = check_sets(generated, reference)?;
    if gen_classes.len() != generated.len() || ref_classes.len() != reference.len() {
        return Err(EdtError::Argument("one label per item required".into()));
    }
    let overall = mmd(generated, reference)?;
    let max_class = gen_classes.iter().chain(ref_classes).copied().max().unwrap_or(0);
    let mut per_class = Vec::new();
    for c in 0..=max_class {
        let pick = |s: &[Vec<f64>], l: &[usize]| -> Vec<Vec<f64>> {
            s.iter().zip(l).filter(|(_, &k)| k == c).map(|(v, _)| v.clone()).collect()
        };
        let (g, r) = (pick(generated, gen_classes), pick(reference, ref_classes));
        if g.is_empty() || r.is_empty() {
            continue;
        }
        let (gm, gs) = moments(&g.iter().collect::<Vec<_>>(), dim);
        let (rm, rs) = moments(&r.iter().collect::<Vec<_>>(), dim);
        per_class.push(ClassStats {
            class: c,
            generated: g.len(),
            reference: r.len(),
            mean_distance: sq_dist(&gm, &rm).sqrt(),
            std_distance: sq_dist(&gs, &rs).sqrt(),
            mmd: mmd_with_bandwidth(&g, &r, overall.bandwidth).ok().map(|m| m.mmd),
        });
    }
    Ok(EvalReport {
        mmd: overall,
        generated: generated.len(),
        reference: reference.len(),
        per_class,
    })
}

/// `m[a][b] = MMD(generated[a], reference[b])` at a shared bandwidth.
pub fn class_mmd_matrix(generated: &[Vec<Vec<f64>>], reference: &[Vec<Vec<f64>>], sigma: f64) -> Result<Vec<Vec<f64>>> {
    generated
        .iter()
        .map(|g| reference.iter().map(|r| mmd_with_bandwidth(g, r, sigma).map(|m| m.mmd)).collect())
        .collect()
}

/// Rows `a` whose smallest entry sits on the diagonal.
pub fn diagonal_wins(m: &[Vec<f64>]) -> usize {
    m.iter()
        .enumerate()
        .filter(|(a, row)| row.iter().enumerate().all(|(b, &v)| b == *a || row[*a] < v))
        .count()
}

/// Median pairwise distance within one set.
pub fn reference_bandwidth(reference: &[Vec<f64>]) -> Result<f64> {
    if reference.len() < 2 {
        return Err(EdtError::Argument("bandwidth needs at least two reference items".into()));
    }
    let (a, b) = reference.split_at(1);
    median_bandwidth(a, b)
}

/// Rows of a `[B, …]` buffer as feature vectors.
pub fn rows(data: &[f32], items: usize) -> Vec<Vec<f64>> {
    if items == 0 {
        return Vec::new();
    }
    data.chunks(data.len() / items)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, v: f64) -> Vec<Vec<f64>> {
        vec![vec![v; 3]; n]
    }

    #[test]
    fn identical_sets_are_near_zero() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let m = mmd(&x, &x).unwrap();
        assert!(m.mmd <= 1e-6 || m.mmd2 <= 1e-6);
    }

    #[test]
    fn disjoint_constants_hit_closed_form() {
        let m = mmd(&constant(10, 0.0), &constant(10, 1.0)).unwrap();
        assert!((m.mmd2 - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((m.bandwidth - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_rejects_empty() {
        let x = constant(4, 0.3);
        let y: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 3]).collect();
        assert_eq!(mmd(&x, &y).unwrap().mmd2, mmd(&y, &x).unwrap().mmd2);
        assert!(mmd(&[], &y).is_err());
    }

    #[test]
    fn class_matrix_picks_own_class() {
        let g = vec![constant(3, 0.0), constant(3, 1.0)];
        let r = vec![constant(3, 0.1), constant(3, 0.9)];
        let m = class_mmd_matrix(&g, &r, 1.0).unwrap();
        assert_eq!(diagonal_wins(&m), 2);
        let swapped = vec![r[1].clone(), r[0].clone()];
        assert_eq!(diagonal_wins(&class_mmd_matrix(&g, &swapped, 1.0).unwrap()), 0);
    }

    #[test]
    fn per_class_report() {
        let g = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let r = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let rep = evaluate(&g, &[0, 1], &r, &[0, 1]).unwrap();
        assert_eq!(rep.per_class.len(), 2);
        assert_eq!(rep.per_class[0].mean_distance, 0.0);
        assert_eq!(rep.per_class[1].mean_distance, 1.0);
    }
}
