//! Synthetic sharp/blurred image pairs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlurKind {
    Gaussian,
    Box,
    LinearMotion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub blur_kinds: Vec<BlurKind>,
    /// Kernel radius in pixels; 0 gives the identity kernel.
    pub blur_radius: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 192,
            size: 32,
            channels: 1,
            blur_kinds: vec![BlurKind::Gaussian, BlurKind::Box, BlurKind::LinearMotion],
            blur_radius: 2,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Index-aligned sharp and blurred images, both `[N, C, S, S]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sharp: Tensor,
    pub blurred: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sharp.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            sharp: self.sharp.select_batch(indices)?,
            blurred: self.blurred.select_batch(indices)?,
        })
    }

    /// First `n_train` pairs for training, the rest for validation.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} pairs at {n_train}",
                self.len()
            )));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }

    /// Conventional three-quarter training split.
    pub fn default_split(&self) -> Result<(Dataset, Dataset)> {
        self.split(self.len() * 3 / 4)
    }

    /// Deterministic seeded subset of `ceil(fraction * N)` pairs.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        let n = self.len();
        self.subset(&subsample_indices(n, fraction, seed)?)
    }
}

pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    if take < n {
        idx.shuffle(&mut rng_for(seed, "subsample"));
        idx.truncate(take);
        idx.sort_unstable();
    }
    Ok(idx)
}

fn to_f32_precision(v: f64) -> f64 {
    f64::from(v as f32)
}

fn sharp_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![rng.random_range(0.2..0.6); size * size];
    let shapes = rng.random_range(2..=4);
    let s = size as f64;
    for _ in 0..shapes {
        match rng.random_range(0..3) {
            0 => {
                let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let r = rng.random_range(0.08 * s..0.3 * s);
                let amp = rng.random_range(-0.5..0.5);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        img[y * size + x] += amp * (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
            1 => {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let (nx, ny) = (angle.cos(), angle.sin());
                let offset = rng.random_range(0.25 * s..0.75 * s);
                let step = rng.random_range(-0.4..0.4);
                for y in 0..size {
                    for x in 0..size {
                        let d = (x as f64 - s / 2.0) * nx + (y as f64 - s / 2.0) * ny + s / 2.0;
                        if d > offset {
                            img[y * size + x] += step;
                        }
                    }
                }
            }
            _ => {
                let period = rng.random_range(3..=6);
                let x0 = rng.random_range(0..size / 2);
                let y0 = rng.random_range(0..size / 2);
                let (wx, wy) = (rng.random_range(size / 4..=size / 2), rng.random_range(size / 4..=size / 2));
                let amp = rng.random_range(0.15..0.4);
                for y in y0..(y0 + wy).min(size) {
                    for x in x0..(x0 + wx).min(size) {
                        let on = ((x - x0) / period + (y - y0) / period) % 2 == 0;
                        img[y * size + x] += if on { amp } else { -amp };
                    }
                }
            }
        }
    }
    img.iter().map(|v| to_f32_precision(v.clamp(0.0, 1.0))).collect()
}

/// Normalised `(2r+1) x (2r+1)` blur kernel.
pub fn blur_kernel(kind: BlurKind, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = 2 * radius + 1;
    let mut ker = vec![0.0; k * k];
    if radius == 0 {
        ker[0] = 1.0;
        return ker;
    }
    let r = radius as f64;
    match kind {
        BlurKind::Box => ker.fill(1.0),
        BlurKind::Gaussian => {
            let sigma = rng.random_range(0.5 * r..0.9 * r);
            for y in 0..k {
                for x in 0..k {
                    let d2 = (x as f64 - r).powi(2) + (y as f64 - r).powi(2);
                    ker[y * k + x] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        BlurKind::LinearMotion => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let samples = 8 * k;
            for i in 0..samples {
                let t = (i as f64 / (samples - 1) as f64) * 2.0 - 1.0;
                let x = (r + t * r * dx).round() as usize;
                let y = (r + t * r * dy).round() as usize;
                ker[y * k + x] += 1.0;
            }
        }
    }
    let total: f64 = ker.iter().sum();
    ker.iter_mut().for_each(|v| *v /= total);
    ker
}

/// Convolution with clamp-to-edge borders.
fn blur(img: &[f64], size: usize, ker: &[f64]) -> Vec<f64> {
    let k = (ker.len() as f64).sqrt() as usize;
    let r = (k / 2) as i64;
    let n = size as i64;
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for ky in 0..k as i64 {
                for kx in 0..k as i64 {
                    let sy = (y + ky - r).clamp(0, n - 1);
                    let sx = (x + kx - r).clamp(0, n - 1);
                    acc += ker[(ky * k as i64 + kx) as usize] * img[(sy * n + sx) as usize];
                }
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

/// Generates the paired dataset. Values are rounded to `f32` precision so the
/// on-disk format reproduces them exactly.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.count == 0 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::InvalidArgument("dataset dimensions must be positive".into()));
    }
    if spec.blur_kinds.is_empty() && spec.blur_radius > 0 {
        return Err(Error::InvalidArgument("no blur kinds given".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let plane = spec.size * spec.size;
    let mut sharp = Vec::with_capacity(spec.count * spec.channels * plane);
    let mut blurred = Vec::with_capacity(sharp.capacity());
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for i in 0..spec.count {
        let mut rng = rng_for(spec.seed, &format!("image{i}"));
        let kind = spec
            .blur_kinds
            .get(i % spec.blur_kinds.len().max(1))
            .copied()
            .unwrap_or(BlurKind::Box);
        let ker = blur_kernel(kind, spec.blur_radius, &mut rng);
        for _ in 0..spec.channels {
            let img = sharp_image(spec.size, &mut rng);
            let mut soft = blur(&img, spec.size, &ker);
            if spec.noise_sigma > 0.0 {
                soft.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            sharp.extend_from_slice(&img);
            blurred.extend(soft.into_iter().map(|v| to_f32_precision(v.clamp(0.0, 1.0))));
        }
    }
    let shape = vec![spec.count, spec.channels, spec.size, spec.size];
    Ok(Dataset {
        sharp: Tensor::new(shape.clone(), sharp)?,
        blurred: Tensor::new(shape, blurred)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    shape: Vec<usize>,
    sharp_file: String,
    blurred_file: String,
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect: usize = shape.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("expected {expect} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

impl Dataset {
    /// Writes `manifest.json`, `sharp.f32` and `blurred.f32` into `dir`.
    pub fn save(&self, dir: &Path, spec: &DatasetSpec) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            spec: spec.clone(),
            shape: self.sharp.shape().to_vec(),
            sharp_file: "sharp.f32".into(),
            blurred_file: "blurred.f32".into(),
        };
        write_f32(&dir.join(&manifest.sharp_file), &self.sharp)?;
        write_f32(&dir.join(&manifest.blurred_file), &self.blurred)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Dataset, DatasetSpec)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let ds = Dataset {
            sharp: read_f32(&dir.join(&m.sharp_file), &m.shape)?,
            blurred: read_f32(&dir.join(&m.blurred_file), &m.shape)?,
        };
        Ok((ds, m.spec))
    }
}
