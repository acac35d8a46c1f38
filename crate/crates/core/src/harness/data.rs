use edt_tensor::{Real, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};

const BACKGROUND: f64 = -0.8;
const MEAN_PROBE: usize = 32;

/// Parameters of the synthetic shape dataset standing in for latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    /// Maximum centre offset in pixels along each axis.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Required separation between per-class channel means.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_jitter() -> usize {
    2
}

fn default_noise() -> f64 {
    0.05
}

fn default_margin() -> f64 {
    0.05
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            class_count: 8,
            channels: 4,
            size: 16,
            seed: 0,
            jitter: default_jitter(),
            noise: default_noise(),
            margin: default_margin(),
        }
    }
}

/// Deterministic class-conditional images in `[-1, 1]`: class `k` draws
/// shape `k mod 8` in a class-specific colour at a jittered position.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    spec: DatasetSpec,
    class_means: Vec<Vec<f64>>,
}

fn inside(kind: usize, dy: f64, dx: f64) -> bool {
    let r = (dy * dy + dx * dx).sqrt();
    match kind {
        0 => dy.abs() <= 3.0 && dx.abs() <= 3.0,
        1 => r <= 3.6,
        2 => (dy.abs() <= 1.0 && dx.abs() <= 4.5) || (dx.abs() <= 1.0 && dy.abs() <= 4.5),
        3 => dy.abs() <= 1.5 && dx.abs() <= 5.0,
        4 => dx.abs() <= 1.5 && dy.abs() <= 5.0,
        5 => (2.2..=4.4).contains(&r),
        6 => (dy - dx).abs() <= 1.0 && dy.abs() <= 5.0,
        _ => {
            let dot = |cy: f64, cx: f64| (dy - cy).abs() <= 1.5 && (dx - cx).abs() <= 1.5;
            dot(-3.0, -3.0) || dot(3.0, 3.0)
        }
    }
}

impl SyntheticDataset {
    pub fn generate(spec: DatasetSpec) -> Result<Self> {
        if spec.class_count == 0 || spec.channels == 0 || spec.size < 8 {
            return Err(EdtError::Config(format!(
                "dataset needs classes >= 1, channels >= 1, size >= 8: {spec:?}"
            )));
        }
        let mut ds = Self {
            spec,
            class_means: Vec::new(),
        };
        ds.class_means = (0..ds.spec.class_count)
            .map(|k| {
                let mut mean = vec![0.0; ds.spec.channels];
                for i in 0..MEAN_PROBE {
                    let (x, _) = ds.sample::<f64>(k + i * ds.spec.class_count);
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += channel_mean(&x, c) / MEAN_PROBE as f64;
                    }
                }
                mean
            })
            .collect();
        let sep = ds.min_mean_separation();
        if ds.spec.class_count > 1 && sep < ds.spec.margin {
            return Err(EdtError::Config(format!(
                "class means separated by {sep:.4}, below margin {}",
                ds.spec.margin
            )));
        }
        Ok(ds)
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn item_shape(&self) -> [usize; 3] {
        [self.spec.channels, self.spec.size, self.spec.size]
    }

    pub fn class_of(&self, index: usize) -> usize {
        index % self.spec.class_count
    }

    /// Per-class channel means measured at generation.
    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    /// Smallest Euclidean distance between two classes' channel means.
    pub fn min_mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.class_means.len() {
            for b in a + 1..self.class_means.len() {
                let d: f64 = self.class_means[a]
                    .iter()
                    .zip(&self.class_means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    fn colour(&self, class: usize, channel: usize) -> f64 {
        if channel < 3 {
            if (class >> channel) & 1 == 1 {
                0.8
            } else {
                -0.2
            }
        } else {
            0.9 - 0.1 * (class / 8) as f64
        }
    }

    /// Item `index` as `[C, H, W]` with its class.
    pub fn sample<T: Real>(&self, index: usize) -> (Tensor<T>, usize) {
        let s = &self.spec;
        let class = self.class_of(index);
        let kind = class % 8;
        let mut rng = Rng::derive(s.seed, index as u64);
        let j = s.jitter as f64;
        let centre = (s.size as f64 - 1.0) / 2.0;
        let cy = centre + (rng.below(2 * s.jitter + 1) as f64 - j);
        let cx = centre + (rng.below(2 * s.jitter + 1) as f64 - j);
        let mut data = Vec::with_capacity(s.channels * s.size * s.size);
        let colours: Vec<f64> = (0..s.channels).map(|c| self.colour(class, c)).collect();
        for &colour in &colours {
            for y in 0..s.size {
                for x in 0..s.size {
                    let base = if inside(kind, y as f64 - cy, x as f64 - cx) {
                        colour
                    } else {
                        BACKGROUND
                    };
                    let v = base + s.noise * rng.normal();
                    data.push(T::of(v.clamp(-1.0, 1.0)));
                }
            }
        }
        let t = Tensor::new(&[s.channels, s.size, s.size], data).expect("extent matches spec");
        (t, class)
    }

    /// Items `indices` stacked as `[B, C, H, W]`.
    pub fn batch<T: Real>(&self, indices: impl IntoIterator<Item = usize>) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::new();
        let mut classes = Vec::new();
        for i in indices {
            let (x, c) = self.sample::<T>(i);
            data.extend(x.into_data());
            classes.push(c);
        }
        let [c, h, w] = self.item_shape();
        let t = Tensor::new(&[classes.len(), c, h, w], data).expect("stacked items");
        (t, classes)
    }

    /// `count` items of `class`, skipping the first `offset` of them.
    pub fn class_batch<T: Real>(&self, class: usize, count: usize, offset: usize) -> Tensor<T> {
        let k = self.spec.class_count;
        self.batch((offset..offset + count).map(|i| class + i * k)).0
    }
}

fn channel_mean(x: &Tensor<f64>, c: usize) -> f64 {
    let plane = x.numel() / x.shape()[0];
    x.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let ds = SyntheticDataset::generate(DatasetSpec::default()).unwrap();
        let (a, ca) = ds.sample::<f32>(13);
        let (b, cb) = ds.sample::<f32>(13);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.shape(), &[4, 16, 16]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (batch, classes) = ds.batch::<f32>(0..10);
        assert_eq!(batch.shape(), &[10, 4, 16, 16]);
        assert_eq!(classes, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1]);
    }

    #[test]
    fn class_means_are_separated() {
        let ds = SyntheticDataset::generate(DatasetSpec::default()).unwrap();
        assert!(ds.min_mean_separation() >= ds.spec().margin);
        let strict = DatasetSpec {
            margin: 10.0,
            ..DatasetSpec::default()
        };
        assert!(SyntheticDataset::generate(strict).is_err());
    }

    #[test]
    fn seeds_change_items() {
        let a = SyntheticDataset::generate(DatasetSpec::default()).unwrap();
        let b = SyntheticDataset::generate(DatasetSpec {
            seed: 1,
            ..DatasetSpec::default()
        })
        .unwrap();
        assert_ne!(a.sample::<f32>(0).0, b.sample::<f32>(0).0);
    }
}
