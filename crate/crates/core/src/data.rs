//! In-memory datasets and the synthetic generators used by the experiments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, normal_vec};
use crate::tensor::Tensor;

/// `n` samples of `positions × channels` values with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub positions: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(positions: usize, channels: usize, data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        let per = positions * channels;
        if per == 0 {
            return Err(Error::Invalid("samples must have at least one value".into()));
        }
        if !data.len().is_multiple_of(per) {
            return Err(Error::Invalid(format!("{} values do not split into samples of {}", data.len(), per)));
        }
        let n = data.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Invalid(format!("{} labels for {} samples", l.len(), n)));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(Dataset { n, positions, channels, data, labels })
    }

    pub fn dims(&self) -> usize {
        self.positions * self.channels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.dims();
        &self.data[i * d..(i + 1) * d]
    }

    /// One more than the largest label, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |&m| m as usize + 1)
    }

    /// Gathers samples into a `[B, D, C]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(indices.len() * self.dims());
        for &i in indices {
            out.extend(self.sample(i).iter().map(|&v| v as f64));
        }
        Tensor::from_parts(vec![indices.len(), self.positions, self.channels], out)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i] as usize).collect())
    }

    pub fn all(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.positions, self.channels], self.data.iter().map(|&v| v as f64).collect())
    }

    /// Builds a dataset from a `[B, D, C]` tensor, rounding to `f32`.
    pub fn from_tensor(t: &Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Invalid(format!("expected [B, D, C], got {:?}", t.shape())));
        }
        Dataset::new(t.shape()[1], t.shape()[2], t.data().iter().map(|&v| v as f32).collect(), labels)
    }
}

/// One component of a two-dimensional Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMode {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl GaussianMode {
    /// Lower Cholesky factor, if the covariance is symmetric positive definite.
    pub fn cholesky(&self) -> Option<[[f64; 2]; 2]> {
        let [[a, b], [c, d]] = self.cov;
        if (b - c).abs() > 1e-12 * (1.0 + b.abs()) || a.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return None;
        }
        let l11 = math::sqrt(a);
        let l21 = b / l11;
        let rest = d - l21 * l21;
        if rest.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return None;
        }
        Some([[l11, 0.0], [l21, math::sqrt(rest)]])
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let (u, v) = (x[0] - self.mean[0], x[1] - self.mean[1]);
        let q = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
        -0.5 * q - 0.5 * math::ln(det) - 2.0 * math::HALF_LN_2PI
    }
}

/// `x₁ ~ N(0, 1)` independent of `x₂ ~ ½N(−2, 0.1²) + ½N(2, 0.1²)`.
pub fn canonical_modes() -> Vec<GaussianMode> {
    let cov = [[1.0, 0.0], [0.0, 0.01]];
    vec![
        GaussianMode { weight: 0.5, mean: [0.0, -2.0], cov },
        GaussianMode { weight: 0.5, mean: [0.0, 2.0], cov },
    ]
}

/// Standard bivariate normal with correlation `rho`.
pub fn correlated_modes(rho: f64) -> Vec<GaussianMode> {
    vec![GaussianMode { weight: 1.0, mean: [0.0, 0.0], cov: [[1.0, rho], [rho, 1.0]] }]
}

pub fn mixture_log_pdf(modes: &[GaussianMode], x: [f64; 2]) -> f64 {
    let logs: Vec<f64> = modes.iter().map(|m| math::ln(m.weight) + m.log_pdf(x)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + math::ln(logs.iter().map(|l| math::exp(l - max)).sum::<f64>())
}

/// `n` draws from a 2D mixture as a dataset with two positions and one
/// channel.
pub fn gen_2d_mixture(modes: &[GaussianMode], n: usize, seed: u64) -> Result<Dataset> {
    if modes.is_empty() {
        return Err(Error::Invalid("mixture needs at least one mode".into()));
    }
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    if modes.iter().any(|m| m.weight.is_nan() || m.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("mixture weights must be nonnegative and sum to 1, got {}", total)));
    }
    let chols = modes
        .iter()
        .map(|m| m.cholesky().ok_or_else(|| Error::Invalid(format!("covariance {:?} is not positive definite", m.cov))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng::stream(seed, 0);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = modes.len() - 1;
        for (i, m) in modes.iter().enumerate() {
            acc += m.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let e = normal_vec(&mut rng, 2);
        let l = chols[k];
        let m = modes[k].mean;
        data.push((m[0] + l[0][0] * e[0]) as f32);
        data.push((m[1] + l[1][0] * e[0] + l[1][1] * e[1]) as f32);
    }
    Dataset::new(2, 1, data, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    GaussiansOnGrid,
    Bars,
    Checker,
}

impl core::str::FromStr for ImageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians-on-grid" => Ok(ImageKind::GaussiansOnGrid),
            "bars" => Ok(ImageKind::Bars),
            "checker" => Ok(ImageKind::Checker),
            _ => Err(Error::Invalid(format!("unknown image kind {:?}", s))),
        }
    }
}

pub const IMAGE_NOISE: f64 = 0.05;

/// Square grayscale images in `[-1, 1]`, one channel per pixel position.
/// Sample `i` has label `i % classes`.
///
/// * bars: even classes are horizontal stripes, odd classes vertical; the
///   stripe period grows with `class / 2`.
/// * checker: a checkerboard whose cell size is `2^(class % 3)`.
/// * gaussians-on-grid: a bright blob centred on one of a 3×3 lattice of
///   anchor points chosen by the class.
pub fn gen_synthetic_images(kind: ImageKind, size: usize, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || classes == 0 {
        return Err(Error::Invalid("size and classes must be positive".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let phase = rng.random_range(0..size);
        let flip = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let jitter = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        let noise = normal_vec(&mut rng, size * size);
        for r in 0..size {
            for c in 0..size {
                let base = match kind {
                    ImageKind::Bars => {
                        let period = 2 * (1 + class / 2);
                        let coord = if class.is_multiple_of(2) { r } else { c };
                        if (coord + phase) % period < period / 2 { 0.8 } else { -0.8 }
                    }
                    ImageKind::Checker => {
                        let cell = 1usize << (class % 3);
                        let on = ((r + phase) / cell + (c + phase) / cell).is_multiple_of(2);
                        flip * if on { 0.8 } else { -0.8 }
                    }
                    ImageKind::GaussiansOnGrid => {
                        let anchor = class % 9;
                        let step = size as f64 / 3.0;
                        let cy = (anchor / 3) as f64 * step + step / 2.0 + jitter[0];
                        let cx = (anchor % 3) as f64 * step + step / 2.0 + jitter[1];
                        let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                        let w = size as f64 / 6.0;
                        1.6 * math::exp(-(dx * dx + dy * dy) / (2.0 * w * w)) - 0.8
                    }
                };
                let v = base + IMAGE_NOISE * noise[r * size + c];
                data.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
        labels.push(class as u32);
    }
    Dataset::new(size * size, 1, data, Some(labels))
}

/// True when rows vary more than columns, i.e. the image shows horizontal
/// structure.
pub fn looks_horizontal(pixels: &[f64], size: usize) -> bool {
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    let rows: Vec<f64> = (0..size).map(|r| pixels[r * size..(r + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let cols: Vec<f64> = (0..size).map(|c| (0..size).map(|r| pixels[r * size + c]).sum::<f64>() / size as f64).collect();
    var(&rows) > var(&cols)
}
