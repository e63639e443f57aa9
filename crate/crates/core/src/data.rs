//! Priors, decoder noise, and datasets.
//!
//! Every sampler is a pure function of `(spec, batch size, seed)`. Datasets
//! are materialized in memory and iterated in a deterministic order that is
//! reshuffled at every epoch boundary from the `(seed, epoch)` substream.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFamily {
    StandardNormal,
    UniformHypercube,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    family: PriorFamily,
    dim: usize,
}

impl PriorSpec {
    pub fn new(family: PriorFamily, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("prior dimension must be at least 1"));
        }
        Ok(Self { family, dim })
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(PriorFamily::StandardNormal, dim)
    }

    pub fn uniform_hypercube(dim: usize) -> Result<Self> {
        Self::new(PriorFamily::UniformHypercube, dim)
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Second moment of one coordinate, used for the IMQ kernel scale.
    pub fn coordinate_variance(&self) -> f64 {
        match self.family {
            PriorFamily::StandardNormal => 1.0,
            PriorFamily::UniformHypercube => 1.0 / 12.0,
        }
    }

    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) {
        match self.family {
            PriorFamily::StandardNormal => {
                for v in out {
                    *v = StandardNormal.sample(rng);
                }
            }
            PriorFamily::UniformHypercube => {
                for v in out {
                    *v = rng.random::<f64>();
                }
            }
        }
    }

    pub fn sample_with(&self, b: usize, rng: &mut Rng) -> Result<Batch> {
        check_batch_size(b)?;
        let mut data = vec![0.0; b * self.dim];
        self.draw_into(rng, &mut data);
        Batch::new(Tensor::new(vec![b, self.dim], data), Space::Latent)
    }
}

/// Uniform `[0, 1]^m` noise fed to the stochastic mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    dim: usize,
}

impl NoiseSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("noise dimension must be at least 1"));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_with(&self, b: usize, rng: &mut Rng) -> Result<Batch> {
        check_batch_size(b)?;
        let data = (0..b * self.dim).map(|_| rng.random::<f64>()).collect();
        Batch::new(Tensor::new(vec![b, self.dim], data), Space::Code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Data,
    Latent,
    Code,
}

/// A finite sample of points tagged with the space it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    data: Tensor,
    space: Space,
}

impl Batch {
    pub fn new(data: Tensor, space: Space) -> Result<Self> {
        if data.shape().is_empty() || data.rows() == 0 {
            return Err(invalid("batch must contain at least one sample"));
        }
        if !data.all_finite() {
            return Err(Error::Numerical("batch contains NaN or infinite entries".into()));
        }
        Ok(Self { data, space })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened per-sample dimensionality.
    pub fn dim(&self) -> usize {
        self.data.row_len()
    }
}

fn check_batch_size(b: usize) -> Result<()> {
    if b == 0 {
        Err(invalid("batch size must be at least 1"))
    } else {
        Ok(())
    }
}

pub fn sample_prior(spec: &PriorSpec, b: usize, seed: u64) -> Result<Batch> {
    spec.sample_with(b, &mut rng::substream(seed, stream::PRIOR, 0))
}

pub fn sample_noise(spec: &NoiseSpec, b: usize, seed: u64) -> Result<Batch> {
    spec.sample_with(b, &mut rng::substream(seed, stream::NOISE, 0))
}

/// Ground-truth parameters of a Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParams {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// One covariance matrix per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl MixtureParams {
    /// `k` isotropic components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let cov = vec![vec![std * std, 0.0], vec![0.0, std * std]];
        Self {
            means,
            weights: vec![1.0 / k as f64; k],
            covariances: vec![cov; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        if self.weights.len() != k || self.covariances.len() != k {
            return Err(invalid("mixture means, weights and covariances differ in length"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(invalid("mixture means must share one positive dimension"));
        }
        for c in &self.covariances {
            if c.len() != d || c.iter().any(|r| r.len() != d) {
                return Err(invalid("covariance shape does not match mean dimension"));
            }
        }
        Ok(())
    }

    fn cholesky_factors(&self) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim();
        self.covariances
            .iter()
            .map(|c| {
                let m = DMatrix::from_fn(d, d, |i, j| c[i][j]);
                m.cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| invalid("covariance is not positive definite"))
            })
            .collect()
    }

    /// Index of the component whose mean is nearest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.means.iter().enumerate() {
            let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Concentric circles with radial Gaussian jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingParams {
    pub radii: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture(MixtureParams),
    Rings(RingParams),
    ImageFolder { path: PathBuf, resolution: usize },
}

/// In-memory dataset with a deterministic, reshuffling cursor.
///
/// A handle is single-owner: [`DatasetHandle::next_batch`] advances its
/// cursor.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    kind: DatasetKind,
    samples: Tensor,
    labels: Option<Vec<usize>>,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl DatasetHandle {
    fn from_samples(kind: DatasetKind, samples: Tensor, labels: Option<Vec<usize>>, seed: u64) -> Self {
        let mut h = Self {
            kind,
            samples,
            labels,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        h.order = h.epoch_order(0);
        h
    }

    /// Wraps an existing sample tensor (`[n, ...]`).
    pub fn from_tensor(kind: DatasetKind, samples: Tensor, seed: u64) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        Ok(Self::from_samples(kind, samples, None, seed))
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::substream(self.seed, stream::DATA_ORDER, epoch));
        order
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    /// Mixture component that generated each sample, when known.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Per-sample shape, e.g. `[2]` or `[3, 64, 64]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.row_len()
    }

    pub fn mixture(&self) -> Option<&MixtureParams> {
        match &self.kind {
            DatasetKind::GaussianMixture(p) => Some(p),
            _ => None,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `b` samples. Crossing an epoch boundary reshuffles with the
    /// next epoch's substream and keeps filling, so every batch has exactly
    /// `b` rows.
    pub fn next_batch(&mut self, b: usize) -> Result<Batch> {
        let idx = self.next_indices(b)?;
        Batch::new(self.samples.select_rows(&idx), Space::Data)
    }

    /// Sample indices of the next batch (advances the cursor).
    pub fn next_indices(&mut self, b: usize) -> Result<Vec<usize>> {
        check_batch_size(b)?;
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.order = self.epoch_order(self.epoch);
            }
            let take = (b - idx.len()).min(self.order.len() - self.cursor);
            idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Ok(idx)
    }

    /// Deterministic held-out split. The test part holds
    /// `round(n * test_fraction)` samples (at least one, and at least one
    /// sample remains for training).
    pub fn split(&self, test_fraction: f64) -> Result<(DatasetHandle, DatasetHandle)> {
        if !(0.0..1.0).contains(&test_fraction) || self.len() < 2 {
            return Err(invalid("split needs 0 <= fraction < 1 and at least two samples"));
        }
        let n = self.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::substream(self.seed, stream::SPLIT, 0));
        let (test_idx, train_idx) = perm.split_at(n_test);
        let pick = |ids: &[usize], salt: u64| {
            let labels = self.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect());
            Self::from_samples(
                self.kind.clone(),
                self.samples.select_rows(ids),
                labels,
                rng::derive_seed(self.seed, stream::SPLIT, salt),
            )
        };
        Ok((pick(train_idx, 1), pick(test_idx, 2)))
    }
}

/// Synthetic datasets with retained ground truth.
pub fn make_synthetic_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<DatasetHandle> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = rng::substream(seed, stream::DATASET, 0);
    match &kind {
        DatasetKind::GaussianMixture(p) => {
            p.validate()?;
            let d = p.dim();
            let chol = p.cholesky_factors()?;
            let mut cdf = Vec::with_capacity(p.weights.len());
            let mut acc = 0.0;
            for w in &p.weights {
                acc += w;
                cdf.push(acc);
            }
            let mut data = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.random::<f64>() * acc;
                let c = cdf.iter().position(|&t| u < t).unwrap_or(cdf.len() - 1);
                let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let x = &chol[c] * eps;
                for j in 0..d {
                    data.push(p.means[c][j] + x[j]);
                }
                labels.push(c);
            }
            let samples = Tensor::new(vec![n, d], data);
            Ok(DatasetHandle::from_samples(kind, samples, Some(labels), seed))
        }
        DatasetKind::Rings(p) => {
            if p.radii.is_empty() || p.noise_std < 0.0 {
                return Err(invalid("rings need at least one radius and nonnegative noise"));
            }
            let mut data = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..p.radii.len());
                let a = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let jitter: f64 = StandardNormal.sample(&mut rng);
                let r = p.radii[c] + p.noise_std * jitter;
                data.push(r * a.cos());
                data.push(r * a.sin());
                labels.push(c);
            }
            let samples = Tensor::new(vec![n, 2], data);
            Ok(DatasetHandle::from_samples(kind, samples, Some(labels), seed))
        }
        DatasetKind::ImageFolder { .. } => Err(invalid(
            "image folders are loaded with load_image_dataset, not synthesized",
        )),
    }
}

/// Tiles `[n, 3, h, w]` samples in `[-1, 1]` into a grid with `columns`
/// images per row; unused cells stay black.
pub fn image_grid(samples: &Tensor, columns: usize) -> Result<image::RgbImage> {
    let shape = samples.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(invalid(format!("image grids need [n, 3, h, w] samples, got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if n == 0 || columns == 0 {
        return Err(invalid("image grid needs at least one sample and one column"));
    }
    let rows = n.div_ceil(columns);
    let mut img = image::RgbImage::new((columns * w) as u32, (rows * h) as u32);
    let plane = h * w;
    for i in 0..n {
        let s = samples.row(i);
        let (ox, oy) = ((i % columns) * w, (i / columns) * h);
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|c| ((s[c * plane + y * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(px));
            }
        }
    }
    Ok(img)
}

/// Loads every decodable image in `path`, center-cropped to a square,
/// resized to `resolution`, and scaled to `[-1, 1]` in CHW layout.
pub fn load_image_dataset(path: &Path, resolution: usize, seed: u64) -> Result<DatasetHandle> {
    if resolution == 0 {
        return Err(invalid("resolution must be positive"));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no files in {}", path.display())));
    }
    let r = resolution as u32;
    let plane = resolution * resolution;
    let mut data = Vec::new();
    let mut n = 0;
    for file in &files {
        let img = match image::open(file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                continue;
            }
        };
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
        let rgb = cropped
            .resize_exact(r, r, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[start + c * plane + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Dataset(format!(
            "none of the {} files in {} could be decoded",
            files.len(),
            path.display()
        )));
    }
    let samples = Tensor::new(vec![n, 3, resolution, resolution], data);
    Ok(DatasetHandle::from_samples(
        DatasetKind::ImageFolder {
            path: path.to_path_buf(),
            resolution,
        },
        samples,
        None,
        seed,
    ))
}
