//! Attention modulation matrix: a fixed, distance-based reweighting of
//! post-softmax attention scores applied at inference time.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use edt_tensor::{OpCounter, Real, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};

pub const DEFAULT_SCALE: f64 = 0.5;

/// Square `N × N` token grid; token `i` sits at `(i / N, i % N)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridGeometry {
    side: usize,
}

impl GridGeometry {
    pub fn new(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(EdtError::Domain(format!("grid side must be >= 2, got {side}")));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.side, i % self.side)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        self.side * x + y
    }

    pub fn distance(&self, i: usize, r: usize) -> f64 {
        let (xi, yi) = self.coords(i);
        let (xr, yr) = self.coords(r);
        let dx = xi as f64 - xr as f64;
        let dy = yi as f64 - yr as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// Distance between opposite corners, `(N − 1)·√2`.
    pub fn d_max(&self) -> f64 {
        (self.side - 1) as f64 * 2f64.sqrt()
    }

    /// `√((N − 1)² + 4)`.
    pub fn default_radius(&self) -> f64 {
        let s = (self.side - 1) as f64;
        (s * s + 4.0).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmmParams {
    pub side: usize,
    pub scale: f64,
    pub radius: f64,
    pub d_max: f64,
    pub period: f64,
    pub frequency: f64,
}

impl AmmParams {
    /// Defaults for the grid: scale 0.5 and radius `√((N − 1)² + 4)`.
    pub fn for_grid(g: GridGeometry) -> Self {
        Self::derive(g, DEFAULT_SCALE, g.default_radius())
    }

    /// `radius = None` selects the grid default.
    pub fn new(g: GridGeometry, scale: f64, radius: Option<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(EdtError::Domain(format!("amm scale must be positive, got {scale}")));
        }
        let radius = radius.unwrap_or_else(|| g.default_radius());
        if !(radius.is_finite() && radius > 0.0) {
            return Err(EdtError::Domain(format!("amm radius must be positive, got {radius}")));
        }
        Ok(Self::derive(g, scale, radius))
    }

    fn derive(g: GridGeometry, scale: f64, radius: f64) -> Self {
        let d_max = g.d_max();
        let period = 4.0 * d_max;
        Self {
            side: g.side(),
            scale,
            radius,
            d_max,
            period,
            frequency: 2.0 * PI / period,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry { side: self.side }
    }
}

/// `k·e^{cos(f·d)}`, ignoring the radius cutoff. The phase is evaluated as
/// `(π/2)·d/(T/4)` so that `d = d_max` lands exactly on `π/2`.
pub fn generation_function(d: f64, p: &AmmParams) -> f64 {
    p.scale * (FRAC_PI_2 * (d / (p.period / 4.0))).cos().exp()
}

/// Row-major `N² × N²` Euclidean distances between grid tokens.
pub fn distance_matrix(g: GridGeometry) -> Tensor<f64> {
    let n = g.tokens();
    Tensor::from_fn(&[n, n], |k| g.distance(k / n, k % n))
}

/// Immutable modulation matrix with `m_ir = F(d_ir)` for `d_ir ≤ R`, else 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationMatrix {
    params: AmmParams,
    entries: Tensor<f64>,
}

pub fn build_amm(g: GridGeometry, p: AmmParams) -> ModulationMatrix {
    let entries = distance_matrix(g).map(|d| {
        if d <= p.radius {
            generation_function(d, &p)
        } else {
            0.0
        }
    });
    ModulationMatrix { params: p, entries }
}

impl ModulationMatrix {
    pub fn params(&self) -> &AmmParams {
        &self.params
    }

    pub fn geometry(&self) -> GridGeometry {
        self.params.geometry()
    }

    pub fn tokens(&self) -> usize {
        self.params.side * self.params.side
    }

    pub fn entries(&self) -> &Tensor<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, r: usize) -> f64 {
        self.entries.data()[i * self.tokens() + r]
    }

    pub fn cast<T: Real>(&self) -> Vec<T> {
        self.entries.data().iter().map(|&v| T::of(v)).collect()
    }

    /// Full matrix as CSV, one grid row per line.
    pub fn to_csv(&self) -> String {
        let n = self.tokens();
        let mut out = String::with_capacity(n * n * 12);
        for row in self.entries.data().chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, params: AmmParams) -> Result<Self> {
        let n = params.side * params.side;
        let mut data = Vec::with_capacity(n * n);
        for (line_no, line) in text.lines().enumerate() {
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|e| {
                    EdtError::Argument(format!("amm csv line {}: {e}", line_no + 1))
                })?;
                data.push(v);
            }
        }
        let entries = Tensor::new(&[n, n], data).map_err(EdtError::from)?;
        Ok(Self { params, entries })
    }

    /// Writes `path` (CSV) and `path` with extension `.json` (parameters).
    pub fn export(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| EdtError::io(path, e))?;
        let meta = metadata_path(path);
        let json = serde_json::to_string_pretty(&self.params)
            .map_err(|e| EdtError::json(&meta, e))?;
        fs::write(&meta, json).map_err(|e| EdtError::io(&meta, e))
    }

    pub fn import(path: &Path) -> Result<Self> {
        let meta = metadata_path(path);
        let text = fs::read_to_string(&meta).map_err(|e| EdtError::io(&meta, e))?;
        let params: AmmParams = serde_json::from_str(&text).map_err(|e| EdtError::json(&meta, e))?;
        let csv = fs::read_to_string(path).map_err(|e| EdtError::io(path, e))?;
        Self::from_csv(&csv, params)
    }
}

pub fn metadata_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

/// Hadamard product of post-softmax scores `[..., n, n]` with the matrix,
/// broadcast over leading axes. Records one MAC per score element.
pub fn modulate<T: Real>(scores: &Tensor<T>, m: &ModulationMatrix) -> Result<Tensor<T>> {
    let n = m.tokens();
    let shape = scores.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != n || shape[shape.len() - 2] != n {
        return Err(TensorError::Shape {
            op: "modulate",
            detail: format!("scores {shape:?} do not end in {n}x{n}"),
        }
        .into());
    }
    let factor = m.cast::<T>();
    OpCounter::record(scores.numel() as u64);
    let data = scores
        .data()
        .chunks(n * n)
        .flat_map(|block| block.iter().zip(&factor).map(|(&a, &f)| a * f))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

type CacheKey = (usize, u64, u64);

/// Shared matrix for `(N, k, R)`, built on first use.
pub fn cached_amm(p: AmmParams) -> Arc<ModulationMatrix> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<ModulationMatrix>>>> = OnceLock::new();
    let key = (p.side, p.scale.to_bits(), p.radius.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(build_amm(p.geometry(), p)))
        .clone()
}

/// AMM on/off flags for each block of each up-sampling-phase stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSchedule {
    pub stages: Vec<Vec<bool>>,
}

impl PlacementSchedule {
    pub fn all_off(decoder_blocks: &[usize]) -> Self {
        Self {
            stages: decoder_blocks.iter().map(|&b| vec![false; b]).collect(),
        }
    }

    pub fn enabled_count(&self) -> usize {
        self.stages.iter().flatten().filter(|&&f| f).count()
    }

    pub fn flag(&self, stage: usize, block: usize) -> bool {
        self.stages
            .get(stage)
            .and_then(|s| s.get(block))
            .copied()
            .unwrap_or(false)
    }

    pub fn check(&self, decoder_blocks: &[usize]) -> Result<()> {
        let lens: Vec<usize> = self.stages.iter().map(Vec::len).collect();
        if lens != decoder_blocks {
            return Err(EdtError::Config(format!(
                "amm schedule has block counts {lens:?}, decoder stages have {decoder_blocks:?}"
            )));
        }
        Ok(())
    }
}

/// AMM on blocks with even in-stage index of every up-sampling stage.
pub fn default_schedule(decoder_blocks: &[usize]) -> Result<PlacementSchedule> {
    if let Some(&b) = decoder_blocks.iter().find(|&&b| b == 0) {
        return Err(EdtError::Config(format!(
            "decoder stage block counts must be >= 1, got {b}"
        )));
    }
    Ok(PlacementSchedule {
        stages: decoder_blocks
            .iter()
            .map(|&b| (0..b).map(|i| i % 2 == 0).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn grid(n: usize) -> GridGeometry {
        GridGeometry::new(n).unwrap()
    }

    #[test]
    fn coordinates_follow_row_major_rule() {
        let g = grid(4);
        for i in 0..16 {
            let (x, y) = g.coords(i);
            assert_eq!(i, 4 * x + y);
        }
        assert!(GridGeometry::new(1).is_err());
    }

    #[test]
    fn small_distances() {
        let g = grid(2);
        assert_eq!(g.distance(0, 3), 2f64.sqrt());
        assert_eq!(g.distance(0, 1), 1.0);
        assert_eq!(g.distance(0, 2), 1.0);
        let g = grid(4);
        assert_eq!(g.distance(g.index(0, 0), g.index(2, 3)), 13f64.sqrt());
        let d = distance_matrix(g);
        let max = d.data().iter().cloned().fold(0.0, f64::max);
        assert!((max - 3.0 * 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn generation_function_endpoints() {
        let p = AmmParams::for_grid(grid(4));
        assert!((generation_function(0.0, &p) - 0.5 * E).abs() < 1e-15);
        assert_eq!(generation_function(p.d_max, &p), 0.5);
        assert!((p.frequency * p.d_max - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn generation_function_reference_values() {
        // f = 2π / (12√2) for N = 4; values from an independent series
        // evaluation of exp(cos(x)).
        let p = AmmParams::for_grid(grid(4));
        assert!((p.frequency - 0.370_240_244).abs() < 1e-9);
        let series = |x: f64| {
            let (mut c, mut term) = (0.0, 1.0);
            for k in 0..30 {
                if k > 0 {
                    term *= -x * x / ((2 * k - 1) * (2 * k)) as f64;
                }
                c += term;
            }
            let (mut e, mut t) = (0.0, 1.0);
            for k in 1..60 {
                e += t;
                t *= c / k as f64;
            }
            0.5 * e
        };
        assert!((generation_function(1.0, &p) - series(p.frequency)).abs() < 1e-12);
        assert!((generation_function(1.0, &p) - 1.270_096_983).abs() < 1e-9);
        let d = 13f64.sqrt();
        assert!((generation_function(d, &p) - series(p.frequency * d)).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_has_no_zeros() {
        let g = grid(2);
        let m = build_amm(g, AmmParams::for_grid(g));
        assert_eq!(m.params().radius, 5f64.sqrt());
        let p = *m.params();
        for i in 0..4 {
            for r in 0..4 {
                let want = p.scale * (p.frequency * g.distance(i, r)).cos().exp();
                assert!((m.get(i, r) - want).abs() < 1e-15);
                assert!(m.get(i, r) >= 0.5);
            }
            assert_eq!(m.get(i, i), 0.5 * E);
        }
    }

    #[test]
    fn four_by_four_cutoff() {
        let g = grid(4);
        let m = build_amm(g, AmmParams::for_grid(g));
        let far = (g.index(0, 0), g.index(3, 3));
        assert_eq!(m.get(far.0, far.1), 0.0);
        let edge = m.get(g.index(0, 0), g.index(2, 3));
        assert!((edge - 0.6316).abs() < 1e-4);
        let zeros = m.entries().data().iter().filter(|&&v| v == 0.0).count();
        // Offsets (3,3) only: d = 3√2 is the sole distance above √13.
        assert_eq!(zeros, 2 * 2);
    }

    #[test]
    fn modulate_matches_scalar_loop() {
        let mut rng = edt_tensor::Rng::new(3);
        let scores = Tensor::<f64>::rand_uniform(&[2, 4, 4], 1.0, &mut rng)
            .map(f64::abs)
            .softmax_rows()
            .unwrap();
        let g = grid(2);
        let m = build_amm(g, AmmParams::for_grid(g));
        let (out, macs) = OpCounter::measure(|| modulate(&scores, &m).unwrap());
        assert_eq!(macs, 32);
        for h in 0..2 {
            for i in 0..4 {
                for r in 0..4 {
                    let got = out.at(&[h, i, r]);
                    assert_eq!(got, scores.at(&[h, i, r]) * m.get(i, r));
                }
            }
        }
        assert!(modulate(&Tensor::<f64>::zeros(&[2, 3, 3]), &m).is_err());
    }

    #[test]
    fn schedule_alternates() {
        let s = default_schedule(&[3, 1]).unwrap();
        assert_eq!(s.stages, vec![vec![true, false, true], vec![true]]);
        assert_eq!(s.enabled_count(), 3);
        assert!(default_schedule(&[0]).is_err());
        assert!(s.check(&[3, 2]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(3);
        let m = build_amm(g, AmmParams::new(g, 0.7, Some(2.0)).unwrap());
        let back = ModulationMatrix::from_csv(&m.to_csv(), *m.params()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn cache_returns_shared_instance() {
        let p = AmmParams::for_grid(grid(5));
        let a = cached_amm(p);
        let b = cached_amm(p);
        assert!(Arc::ptr_eq(&a, &b));
    }
}
