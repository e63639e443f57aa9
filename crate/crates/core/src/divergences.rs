//! Distances between distributions: the IMQ-kernel MMD, the gradient
//! penalized critic objective, and Gaussian Fréchet distances.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::data::PriorSpec;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Inverse multiquadratics kernel `k(a, b) = C / (C + ‖a - b‖²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    scale: f64,
}

impl KernelSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("kernel scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// `C = 2 m σ²` where `σ²` is the prior's per-coordinate variance.
    pub fn for_prior(prior: &PriorSpec) -> Self {
        Self {
            scale: 2.0 * prior.dim() as f64 * prior.coordinate_variance(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    fn eval_sq(&self, sq_dist: f64) -> f64 {
        self.scale / (self.scale + sq_dist)
    }
}

pub fn imq_kernel(a: &[f64], b: &[f64], spec: &KernelSpec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(spec.eval_sq(sq_dist(a, b)))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(invalid("MMD needs at least two samples per batch"));
    }
    if x.row_len() != y.row_len() {
        return Err(Error::DimensionMismatch {
            expected: x.row_len(),
            got: y.row_len(),
        });
    }
    Ok(())
}

/// Unbiased within-batch terms plus the full cross term:
/// `Σ_{i≠j} k(x_i,x_j)/(n(n-1)) + Σ_{i≠j} k(y_i,y_j)/(m(m-1)) - 2 Σ_{i,j} k(x_i,y_j)/(nm)`.
pub fn mmd_u_statistic(x: &Tensor, y: &Tensor, spec: &KernelSpec) -> Result<f64> {
    check_pair(x, y)?;
    let within = |t: &Tensor| {
        let n = t.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += spec.eval_sq(sq_dist(t.row(i), t.row(j)));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let (n, m) = (x.rows(), y.rows());
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += spec.eval_sq(sq_dist(x.row(i), y.row(j)));
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (n * m) as f64)
}

fn kernel_matrix(a: &Var, b: &Var, c: f64) -> Var {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let aa = a.square().sum_cols().broadcast_cols(m);
    let bb = b.square().sum_cols().reshape(&[m]).broadcast_rows(n);
    let d = aa.add(&bb).sub(&a.matmul(&b.transpose()).scale(2.0));
    Var::constant(Tensor::full(&[n, m], c)).div(&d.add_scalar(c))
}

fn off_diagonal_mask(n: usize) -> Tensor {
    let mut t = vec![1.0; n * n];
    for i in 0..n {
        t[i * n + i] = 0.0;
    }
    Tensor::new(vec![n, n], t)
}

/// Differentiable form of [`mmd_u_statistic`] for `[b, d]` inputs.
pub fn mmd_u_var(x: &Var, y: &Var, spec: &KernelSpec) -> Result<Var> {
    check_pair(x.value(), y.value())?;
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let c = spec.scale();
    let kxx = kernel_matrix(x, x, c).mul_const(&off_diagonal_mask(n)).sum();
    let kyy = kernel_matrix(y, y, c).mul_const(&off_diagonal_mask(m)).sum();
    let kxy = kernel_matrix(x, y, c).sum();
    Ok(kxx
        .scale(1.0 / (n * (n - 1)) as f64)
        .add(&kyy.scale(1.0 / (m * (m - 1)) as f64))
        .sub(&kxy.scale(2.0 / (n * m) as f64)))
}

/// Critic objective with its pieces.
pub struct CriticLoss {
    /// `mean f(x̂) - mean f(x) + λ mean (‖∇f(x̃)‖ - 1)²`.
    pub total: Var,
    pub wasserstein: f64,
    pub penalty: f64,
}

fn flat(x: &Var) -> Var {
    let b = x.shape()[0];
    let w: usize = x.shape()[1..].iter().product();
    x.reshape(&[b, w])
}

/// Gradient-penalized critic loss with explicit interpolation weights
/// `nu` (one per sample). Both batches are treated as constants; the result
/// differentiates w.r.t. whatever parameters `critic` closes over,
/// including through the input-gradient norm.
pub fn critic_loss_with(
    critic: &dyn Fn(&Var) -> Var,
    x: &Tensor,
    x_hat: &Tensor,
    lambda_gp: f64,
    nu: &[f64],
) -> Result<CriticLoss> {
    if x.shape() != x_hat.shape() {
        return Err(invalid(format!(
            "real batch {:?} and fake batch {:?} differ in shape",
            x.shape(),
            x_hat.shape()
        )));
    }
    let b = x.rows();
    if nu.len() != b {
        return Err(invalid("one interpolation weight per sample is required"));
    }
    let w = x.row_len();
    let mut mixed = Vec::with_capacity(x.len());
    for i in 0..b {
        let v = nu[i];
        mixed.extend(x.row(i).iter().zip(x_hat.row(i)).map(|(a, c)| v * a + (1.0 - v) * c));
    }
    let x_tilde = Var::param(Tensor::new(x.shape().to_vec(), mixed));
    let f_real = critic(&Var::constant(x.clone()));
    let f_fake = critic(&Var::constant(x_hat.clone()));
    let f_mix = critic(&x_tilde);
    if f_real.value().len() != b {
        return Err(invalid("critic must return one score per sample"));
    }
    let g = grad(&f_mix.sum(), std::slice::from_ref(&x_tilde), true).remove(0);
    debug_assert_eq!(flat(&g).shape(), &[b, w]);
    let gap = flat(&g).row_norms().add_scalar(-1.0).square().mean();
    let wass = f_fake.mean().sub(&f_real.mean());
    let penalty = gap.scale(lambda_gp);
    Ok(CriticLoss {
        wasserstein: wass.item(),
        penalty: penalty.item(),
        total: wass.add(&penalty),
    })
}

/// Draws one interpolation weight per sample from `Uniform(0, 1)`.
pub fn draw_mixing(b: usize, seed: u64, counter: u64) -> Vec<f64> {
    let mut r = rng::substream(seed, stream::MIXING, counter);
    (0..b).map(|_| r.random::<f64>()).collect()
}

/// [`critic_loss_with`] with per-sample weights drawn from `seed`.
pub fn critic_loss(
    critic: &dyn Fn(&Var) -> Var,
    x: &Tensor,
    x_hat: &Tensor,
    lambda_gp: f64,
    seed: u64,
) -> Result<CriticLoss> {
    critic_loss_with(critic, x, x_hat, lambda_gp, &draw_mixing(x.rows(), seed, 0))
}

/// `-mean f(x̂)`.
pub fn generator_adversarial_loss(critic: &dyn Fn(&Var) -> Var, x_hat: &Var) -> Result<Var> {
    let s = critic(x_hat);
    if s.value().len() != x_hat.shape()[0] {
        return Err(invalid("critic must return one score per sample"));
    }
    Ok(s.mean().neg())
}

/// Mean and covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, unbiased.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn fit(features: &Tensor) -> Result<Self> {
        let n = features.rows();
        if n < 2 {
            return Err(invalid("Gaussian fit needs at least two samples"));
        }
        let d = features.row_len();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for i in 0..n {
            for ((c, x), m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
                *c = x - m;
            }
            for a in 0..d {
                let ca = centered[a];
                if ca == 0.0 {
                    continue;
                }
                for b in a..d {
                    cov[a * d + b] += ca * centered[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Maps a batch into the feature space of the Fréchet surrogate.
pub trait Embed {
    fn embed(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Flattens raw samples into feature vectors.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEmbedder;

impl Embed for IdentityEmbedder {
    fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(batch.reshape(&[batch.rows(), batch.row_len()]))
    }
}

pub fn embed_and_fit(batch: &Tensor, embedder: &dyn Embed) -> Result<GaussianStats> {
    if batch.rows() < 2 {
        return Err(invalid("Gaussian fit needs at least two samples"));
    }
    GaussianStats::fit(&embedder.embed(batch)?)
}

/// Square root of a symmetric PSD matrix.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-8 * top {
            return Err(Error::Numerical(format!("covariance is not PSD (eigenvalue {v})")));
        }
        *v = if *v < EIGEN_FLOOR { 0.0 } else { v.sqrt() };
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ₁ - μ₂‖² + tr(Σ₁ + Σ₂ - 2 (Σ₁ Σ₂)^{1/2})`, with the trace of the cross
/// term computed as `tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimensionMismatch {
            expected: s1.dim(),
            got: s2.dim(),
        });
    }
    let mean_term: f64 = s1.mean.iter().zip(&s2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let c1 = s1.cov_matrix();
    let c2 = s2.cov_matrix();
    let r1 = sqrtm_psd(&c1)?;
    let cross = sqrtm_psd(&(&r1 * &c2 * &r1))?;
    Ok(mean_term + c1.trace() + c2.trace() - 2.0 * cross.trace())
}

/// Fréchet distance between Gaussian fits of two raw sample sets.
pub fn frechet_between(x: &Tensor, y: &Tensor, embedder: &dyn Embed) -> Result<f64> {
    frechet_distance(&embed_and_fit(x, embedder)?, &embed_and_fit(y, embedder)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let k = KernelSpec::new(2.0).unwrap();
        assert_eq!(imq_kernel(&[0.3, 0.1], &[0.3, 0.1], &k).unwrap(), 1.0);
        assert!((imq_kernel(&[0.0], &[1.0], &k).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(imq_kernel(&[0.0], &[1.0, 2.0], &k).is_err());
        assert!(KernelSpec::new(0.0).is_err());
    }

    #[test]
    fn default_scale_follows_the_prior() {
        assert_eq!(KernelSpec::for_prior(&PriorSpec::standard_normal(8).unwrap()).scale(), 16.0);
    }

    #[test]
    fn differentiable_mmd_matches_plain() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, -1.0, 0.5, 0.3, 0.3]);
        let y = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.2, -0.4, 0.0, 0.0, 2.0, 1.0]);
        let k = KernelSpec::new(1.5).unwrap();
        let a = mmd_u_statistic(&x, &y, &k).unwrap();
        let b = mmd_u_var(&Var::constant(x), &Var::constant(y), &k).unwrap().item();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn mmd_rejects_single_samples() {
        let one = Tensor::new(vec![1, 1], vec![0.0]);
        let two = Tensor::new(vec![2, 1], vec![0.0, 1.0]);
        assert!(mmd_u_statistic(&one, &two, &KernelSpec::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let s = |m: f64, v: f64| GaussianStats {
            mean: vec![m],
            cov: vec![v],
            count: 10,
        };
        assert!((frechet_distance(&s(0.0, 1.0), &s(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&s(0.0, 1.0), &s(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&s(0.0, 0.0), &s(0.0, 0.0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_batch_has_zero_covariance() {
        let t = Tensor::new(vec![5, 2], [1.5, -2.0].repeat(5));
        let s = embed_and_fit(&t, &IdentityEmbedder).unwrap();
        assert!(s.cov.iter().all(|&c| c == 0.0));
        assert_eq!(s.mean, vec![1.5, -2.0]);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let bad = GaussianStats {
            mean: vec![0.0, 0.0],
            cov: vec![0.0, 1.0, 1.0, 0.0],
            count: 3,
        };
        let ok = GaussianStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            count: 3,
        };
        assert!(matches!(frechet_distance(&bad, &ok), Err(Error::Numerical(_))));
    }
}
