//! Metrics, rate sweeps and the theory harness.
//!
//! Codecs are evaluated through [`StochasticCodec`], so trained networks,
//! the exact Voronoi-resampling construction and test doubles share one
//! code path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{DatasetHandle, PriorSpec};
use crate::divergences::{embed_and_fit, frechet_distance, mmd_u_statistic, Embed, GaussianStats, IdentityEmbedder, KernelSpec};
use crate::error::{invalid, io_err, Error, Result};
use crate::models::{image_embedder, ArchParams, Model, Role};
use crate::quantization::{
    build_hypercube_quantizer, fit_centers, hard_quantize, hypercube_distance_bound, quantize_and_resample, resample_cell,
    CodeSpec, DEFAULT_REJECTION_CAP,
};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;
use crate::training::{
    lambda_schedule, train_cae, train_codec, train_gc, train_generator, Codec, GeneratorAlgo, RunOptions, TrainConfig,
};

/// Rows processed per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 512;
pub const DEFAULT_PV_CODES: usize = 256;
pub const DEFAULT_PV_DRAWS: usize = 100;
pub const BOOTSTRAP_REPLICATES: usize = 200;
pub const MMD_BLOCKS: usize = 50;
/// Width of the significance band, in standard errors.
pub const BAND_SIGMAS: f64 = 3.0;

/// An encoder / stochastic decoder pair.
pub trait StochasticCodec {
    /// Codes for a batch, one row per sample.
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    /// One reconstruction per code row, with decoder randomness from `rng`.
    fn decode(&self, code: &Tensor, rng: &mut Rng) -> Result<Tensor>;
    fn rate_bits(&self) -> f64;
    /// Fingerprint of the generator the decoder ends in, if any.
    fn generator_fingerprint(&self) -> Option<String> {
        None
    }
    fn reconstruct(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let code = self.encode(x)?;
        self.decode(&code, rng)
    }
}

impl StochasticCodec for Codec {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Codec::encode(self, x)
    }

    fn decode(&self, code: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        Codec::decode(self, code, rng)
    }

    fn rate_bits(&self) -> f64 {
        self.rate_bits as f64
    }

    fn generator_fingerprint(&self) -> Option<String> {
        Some(self.generator.fingerprint())
    }
}

/// The exact construction: quantize a latent with `spec`, then draw a
/// fresh latent from the prior restricted to the same cell and decode it
/// with the generator.
pub struct VoronoiCodec<'a> {
    pub generator: &'a Model,
    /// Maps data to latents (an inverse of the generator in synthetic
    /// pipelines).
    pub latent_of: Box<dyn Fn(&Tensor) -> Result<Tensor> + 'a>,
    pub spec: CodeSpec,
    pub prior: PriorSpec,
}

impl StochasticCodec for VoronoiCodec<'_> {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let q = hard_quantize(&(self.latent_of)(x)?, &self.spec)?;
        let symbols = q.symbols.iter().map(|&s| s as f64).collect();
        Ok(Tensor::new(vec![q.len(), q.sites], symbols))
    }

    fn decode(&self, code: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut latents = Vec::with_capacity(code.rows() * self.prior.dim());
        for i in 0..code.rows() {
            let symbols: Vec<usize> = code.row(i).iter().map(|&s| s as usize).collect();
            latents.extend(resample_cell(&self.spec, &symbols, &self.prior, rng, DEFAULT_REJECTION_CAP)?);
        }
        self.generator.infer(&Tensor::new(vec![code.rows(), self.prior.dim()], latents))
    }

    fn rate_bits(&self) -> f64 {
        self.spec.rate_bits()
    }

    fn generator_fingerprint(&self) -> Option<String> {
        Some(self.generator.fingerprint())
    }
}

fn head(data: &Tensor, n: usize) -> Result<Tensor> {
    if data.rows() == 0 {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    if n == 0 {
        return Err(invalid("need at least one evaluation sample"));
    }
    let n = n.min(data.rows());
    Ok(data.select_rows(&(0..n).collect::<Vec<_>>()))
}

fn chunked(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_CHUNK).min(x.rows());
        parts.push(f(&x.select_rows(&(start..end).collect::<Vec<_>>()))?);
        start = end;
    }
    Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()))
}

/// Reconstructs every row of `x` once.
pub fn reconstruct_all(codec: &dyn StochasticCodec, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    chunked(x, |c| codec.reconstruct(c, rng))
}

/// Mean squared error per dimension over the first `n` rows of `data`,
/// one stochastic reconstruction each.
pub fn eval_mse(codec: &dyn StochasticCodec, data: &Tensor, n: usize, rng: &mut Rng) -> Result<f64> {
    let x = head(data, n)?;
    let rec = reconstruct_all(codec, &x, rng)?;
    let x_flat = x.reshape(&[x.rows(), x.row_len()]);
    let r_flat = rec.reshape(&[rec.rows(), rec.row_len()]);
    if x_flat.shape() != r_flat.shape() {
        return Err(Error::DimensionMismatch {
            expected: x_flat.len(),
            got: r_flat.len(),
        });
    }
    let sq: f64 = x_flat.data().iter().zip(r_flat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / x_flat.len() as f64)
}

/// Mean conditional variance of the output over `n_draws` decodings of
/// each of the first `n_codes` codes (divisor `n_draws - 1`).
pub fn eval_pv(codec: &dyn StochasticCodec, data: &Tensor, n_codes: usize, n_draws: usize, rng: &mut Rng) -> Result<f64> {
    if n_draws < 2 {
        return Err(invalid("conditional variance needs at least two draws per code"));
    }
    let x = head(data, n_codes)?;
    let codes = codec.encode(&x)?;
    let mut total = 0.0;
    for i in 0..codes.rows() {
        let repeated = codes.select_rows(&vec![i; n_draws]);
        let out = codec.decode(&repeated, rng)?;
        let d = out.row_len();
        let mut acc = 0.0;
        for j in 0..d {
            let shift = out.row(0)[j];
            let (s1, s2) = (0..n_draws).fold((0.0, 0.0), |(s1, s2), r| {
                let d = out.row(r)[j] - shift;
                (s1 + d, s2 + d * d)
            });
            acc += (s2 - s1 * s1 / n_draws as f64) / (n_draws - 1) as f64;
        }
        total += acc / d as f64;
    }
    Ok(total / codes.rows() as f64)
}

/// Fréchet distance between `reference` and the embedded `candidate`.
pub fn eval_fid_surrogate(reference: &GaussianStats, candidate: &Tensor, embedder: &dyn Embed) -> Result<f64> {
    if reference.count < 2 {
        return Err(invalid("reference statistics need at least two samples"));
    }
    frechet_distance(reference, &embed_and_fit(candidate, embedder)?)
}

/// The embedder used for a data shape: identity for vectors, the fixed
/// convolutional feature net for images.
pub fn default_embedder(data_shape: &[usize]) -> Result<Box<dyn Embed>> {
    if data_shape.len() == 3 {
        Ok(Box::new(image_embedder(data_shape, 64)?))
    } else {
        Ok(Box::new(IdentityEmbedder))
    }
}

/// An MMD estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    /// Whether `self` and `other` agree within [`BAND_SIGMAS`] combined
    /// standard errors.
    pub fn agrees_with(&self, other: &Estimate) -> bool {
        (self.value - other.value).abs() <= BAND_SIGMAS * self.std_err.hypot(other.std_err)
    }
}

/// Block MMD: the mean of U-statistics on `blocks` disjoint row blocks,
/// with a bootstrap standard error over the block values.
pub fn mmd_with_error(x: &Tensor, y: &Tensor, kernel: &KernelSpec, blocks: usize, seed: u64) -> Result<Estimate> {
    let n = x.rows().min(y.rows());
    if blocks < 2 || n / blocks < 2 {
        return Err(invalid(format!("{n} rows cannot form {blocks} blocks of at least two")));
    }
    let size = n / blocks;
    let values = (0..blocks)
        .map(|b| {
            let idx: Vec<usize> = (b * size..(b + 1) * size).collect();
            mmd_u_statistic(&x.select_rows(&idx), &y.select_rows(&idx), kernel)
        })
        .collect::<Result<Vec<_>>>()?;
    let value = values.iter().sum::<f64>() / blocks as f64;
    let mut r = rng::substream(seed, stream::EVAL, 0);
    let means: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
        .map(|_| (0..blocks).map(|_| values[r.random_range(0..blocks)]).sum::<f64>() / blocks as f64)
        .collect();
    let mm = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - mm) * (v - mm)).sum::<f64>() / (means.len() - 1) as f64;
    Ok(Estimate {
        value,
        std_err: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub m: usize,
    pub rates: Vec<usize>,
    /// Mean `‖x - B(E(x))‖` per rate.
    pub distortions: Vec<f64>,
    /// `√m · 2^{-R/m}` per rate.
    pub bounds: Vec<f64>,
    pub within_bound: Vec<bool>,
    /// Least-squares slope of `log2(distortion)` against `R`.
    pub slope: f64,
    /// Distortions of Lloyd-fitted codebooks at the small rates, as a
    /// cross-check of the hypercube construction.
    pub lloyd_distortions: Vec<Option<f64>>,
}

impl Theorem1Report {
    pub fn strictly_decreasing(&self) -> bool {
        self.distortions.windows(2).all(|w| w[1] < w[0])
    }

    pub fn all_within_bound(&self) -> bool {
        self.within_bound.iter().all(|&b| b)
    }

    /// The slope predicted by the exponential decay.
    pub fn expected_slope(&self) -> f64 {
        -1.0 / self.m as f64
    }

    /// Whether the fitted slope lies within [`SLOPE_TOLERANCE`] (relative)
    /// of [`Theorem1Report::expected_slope`].
    pub fn slope_within_tolerance(&self) -> bool {
        let e = self.expected_slope();
        (self.slope - e).abs() <= SLOPE_TOLERANCE * e.abs()
    }

    pub fn passed(&self) -> bool {
        self.all_within_bound() && self.strictly_decreasing() && self.slope_within_tolerance()
    }
}

/// Relative slack on the fitted decay slope.
pub const SLOPE_TOLERANCE: f64 = 0.15;

/// Highest rate at which the Lloyd cross-check runs.
pub const LLOYD_CHECK_MAX_BITS: usize = 4;
const LLOYD_CHECK_SAMPLES: usize = 20_000;

/// Measures the quantize-and-resample gap with a uniform prior on
/// `[0, 1]^m`, identity generator and hypercube quantizer at `R = k m`.
pub fn verify_theorem1(m: usize, k_list: &[usize], n: usize, seed: u64) -> Result<Theorem1Report> {
    if !(1..=3).contains(&m) {
        return Err(invalid(format!("m must be 1, 2 or 3, got {m}")));
    }
    if n < 10_000 {
        return Err(invalid(format!("need n >= 10000 samples, got {n}")));
    }
    if k_list.len() < 2 || k_list.contains(&0) {
        return Err(invalid("need at least two positive k values"));
    }
    let prior = PriorSpec::uniform_hypercube(m)?;
    let rates: Vec<usize> = k_list.iter().map(|k| k * m).collect();
    let mut distortions = Vec::with_capacity(rates.len());
    let mut lloyd_distortions = Vec::with_capacity(rates.len());
    for (i, &rate) in rates.iter().enumerate() {
        let x = prior.sample_with(n, &mut rng::substream(seed, stream::PRIOR, i as u64))?.into_tensor();
        let spec = build_hypercube_quantizer(m, rate)?;
        let mut r = rng::substream(seed, stream::RESAMPLE, i as u64);
        let y = quantize_and_resample(&x, &spec, &prior, &mut r)?;
        distortions.push(mean_distance(&x, &y));
        lloyd_distortions.push(if rate <= LLOYD_CHECK_MAX_BITS {
            let sub = x.select_rows(&(0..LLOYD_CHECK_SAMPLES.min(n)).collect::<Vec<_>>());
            let fit = fit_centers(&sub, 1 << rate, rng::derive_seed(seed, stream::CENTERS, i as u64))?;
            let y = quantize_and_resample(&sub, &fit.spec, &prior, &mut r)?;
            Some(mean_distance(&sub, &y))
        } else {
            None
        });
    }
    let bounds: Vec<f64> = rates.iter().map(|&r| hypercube_distance_bound(m, r)).collect();
    let within_bound = distortions.iter().zip(&bounds).map(|(d, b)| d <= b).collect();
    let xs: Vec<f64> = rates.iter().map(|&r| r as f64).collect();
    let ys: Vec<f64> = distortions.iter().map(|d| d.log2()).collect();
    Ok(Theorem1Report {
        m,
        rates,
        distortions,
        bounds,
        within_bound,
        slope: least_squares_slope(&xs, &ys),
        lloyd_distortions,
    })
}

fn mean_distance(x: &Tensor, y: &Tensor) -> f64 {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / x.rows() as f64
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub rate_bits: f64,
    /// MMD between reconstructions and reference data.
    pub reconstruction: Estimate,
    pub within_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// MMD between generator samples and reference data.
    pub generator: Estimate,
    pub rows: Vec<InvarianceRow>,
}

impl InvarianceReport {
    pub fn all_within_band(&self) -> bool {
        self.rows.iter().all(|r| r.within_band)
    }
}

/// Compares `MMD(codec(inputs), reference)` at every rate with
/// `MMD(G(Z), reference)`. All codecs must decode through `generator`.
pub fn check_distribution_invariance(
    generator: &Model,
    codecs: &[&dyn StochasticCodec],
    inputs: &Tensor,
    reference: &Tensor,
    prior: &PriorSpec,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<InvarianceReport> {
    if generator.role() != Role::Generator {
        return Err(Error::RoleMismatch {
            expected: Role::Generator.name().into(),
            found: generator.role().name().into(),
        });
    }
    let fp = generator.fingerprint();
    for c in codecs {
        match c.generator_fingerprint() {
            Some(f) if f == fp => {}
            other => {
                return Err(Error::FingerprintMismatch(format!(
                    "codec at {} bits decodes through {}, expected {fp}",
                    c.rate_bits(),
                    other.unwrap_or_else(|| "no generator".into())
                )))
            }
        }
    }
    let n = inputs.rows().min(reference.rows());
    let flat = |t: &Tensor| t.reshape(&[t.rows(), t.row_len()]);
    let reference = flat(reference);
    let z = prior.sample_with(n, &mut rng::substream(seed, stream::PRIOR, u64::MAX))?.into_tensor();
    let samples = chunked(&z, |c| generator.infer(c))?;
    let generator_est = mmd_with_error(&flat(&samples), &reference, kernel, MMD_BLOCKS, seed)?;
    let mut rows = Vec::with_capacity(codecs.len());
    for (i, c) in codecs.iter().enumerate() {
        let mut r = rng::substream(seed, stream::EVAL, 1 + i as u64);
        let rec = reconstruct_all(*c, inputs, &mut r)?;
        let est = mmd_with_error(&flat(&rec), &reference, kernel, MMD_BLOCKS, seed)?;
        rows.push(InvarianceRow {
            rate_bits: c.rate_bits(),
            reconstruction: est,
            within_band: est.agrees_with(&generator_est),
        });
    }
    Ok(InvarianceReport {
        generator: generator_est,
        rows,
    })
}

/// Methods compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodTag {
    #[serde(rename = "dplc-wae")]
    DplcWae,
    #[serde(rename = "dplc-wgan-gp")]
    DplcWganGp,
    #[serde(rename = "dplc-wpp")]
    DplcWpp,
    #[serde(rename = "cae")]
    Cae,
    #[serde(rename = "gc")]
    Gc,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [
        MethodTag::DplcWae,
        MethodTag::DplcWganGp,
        MethodTag::DplcWpp,
        MethodTag::Cae,
        MethodTag::Gc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::DplcWae => "dplc-wae",
            MethodTag::DplcWganGp => "dplc-wgan-gp",
            MethodTag::DplcWpp => "dplc-wpp",
            MethodTag::Cae => "cae",
            MethodTag::Gc => "gc",
        }
    }

    /// The generator algorithm of a DPLC method.
    pub fn generator_algo(self) -> Option<GeneratorAlgo> {
        match self {
            MethodTag::DplcWae => Some(GeneratorAlgo::WaeMmd),
            MethodTag::DplcWganGp => Some(GeneratorAlgo::WganGp),
            MethodTag::DplcWpp => Some(GeneratorAlgo::Wpp),
            _ => None,
        }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

/// Column order of the metrics table.
pub const METRICS_HEADER: [&str; 9] = [
    "run_id",
    "method",
    "rate_bpp",
    "iteration",
    "mse",
    "rfid_surrogate",
    "sfid_surrogate",
    "pv",
    "wall_seconds",
];

/// One row of the metrics table. Field order matches [`METRICS_HEADER`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: String,
    pub rate_bpp: f64,
    pub iteration: u64,
    pub mse: f64,
    pub rfid_surrogate: f64,
    pub sfid_surrogate: f64,
    pub pv: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rate_bpp", self.rate_bpp),
            ("mse", self.mse),
            ("rfid_surrogate", self.rfid_surrogate),
            ("sfid_surrogate", self.sfid_surrogate),
            ("pv", self.pv),
            ("wall_seconds", self.wall_seconds),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{} at {} bpp: {name} = {v}", self.method, self.rate_bpp)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<MetricsRecord>,
}

impl SweepReport {
    /// Checks every record and that each method's rates strictly increase.
    pub fn validate(&self) -> Result<()> {
        let mut last: BTreeMap<&str, f64> = BTreeMap::new();
        for r in &self.records {
            r.validate()?;
            if let Some(&prev) = last.get(r.method.as_str()) {
                if r.rate_bpp <= prev {
                    return Err(invalid(format!(
                        "{}: rate {} does not follow {prev}",
                        r.method, r.rate_bpp
                    )));
                }
            }
            last.insert(&r.method, r.rate_bpp);
        }
        Ok(())
    }

    /// Records of `method` in rate order.
    pub fn method(&self, method: MethodTag) -> Vec<&MetricsRecord> {
        self.records.iter().filter(|r| r.method == method.as_str()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.records.is_empty() {
            w.write_record(METRICS_HEADER)?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?;
        if header.iter().ne(METRICS_HEADER) {
            return Err(invalid(format!("unexpected metrics header in {}", path.display())));
        }
        let records = rd
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
            ?;
        Ok(Self { records })
    }
}

/// How codec regularization weights follow the rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaRule {
    /// `λ_MMD` at the reference rate.
    pub mmd_base: f64,
    /// GC adversarial weight at the reference rate.
    pub gc_base: f64,
    /// Reference rate in code bits.
    pub reference_bits: usize,
    /// Fixed `λ_MMD` for every rate, bypassing the CAE table.
    #[serde(default)]
    pub mmd_override: Option<f64>,
}

/// Evaluation sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_eval: usize,
    pub pv_codes: usize,
    pub pv_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_eval: 10_000,
            pv_codes: DEFAULT_PV_CODES,
            pv_draws: DEFAULT_PV_DRAWS,
        }
    }
}

/// Everything a sweep needs besides the data.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub run_id: String,
    pub methods: Vec<MethodTag>,
    pub rates_bits: Vec<usize>,
    /// Shape whose element count divides the code bits into bpp.
    pub pixel_dims: Vec<usize>,
    pub arch: ArchParams,
    pub prior: PriorSpec,
    pub generator: BTreeMap<GeneratorAlgo, TrainConfig>,
    pub codec: TrainConfig,
    pub cae: TrainConfig,
    pub gc: TrainConfig,
    pub lambda: LambdaRule,
    pub eval: EvalSettings,
    pub seed: u64,
    /// Checkpoint directory: existing checkpoints are reused, new ones
    /// written.
    pub store: Option<PathBuf>,
    /// Train missing checkpoints; when `false` a missing one is an error.
    pub train_missing: bool,
    pub log_every: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("no methods to sweep"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(invalid("methods listed twice"));
        }
        if self.rates_bits.is_empty() || self.rates_bits.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("rates must be nonempty and strictly increasing"));
        }
        for m in &self.methods {
            if let Some(a) = m.generator_algo() {
                if !self.generator.contains_key(&a) {
                    return Err(invalid(format!("no trainer settings for {}", a.name())));
                }
            }
        }
        Ok(())
    }

    fn needs_cae(&self) -> bool {
        self.methods
            .iter()
            .any(|m| *m == MethodTag::Cae || *m == MethodTag::Gc || (m.generator_algo().is_some() && self.lambda.mmd_override.is_none()))
    }

    fn rate_bpp(&self, bits: usize) -> Result<f64> {
        crate::quantization::bitrate_bpp(&[bits], &self.pixel_dims)
    }
}

/// A finished sweep: the report plus the trained codecs.
pub struct SweepOutcome {
    pub report: SweepReport,
    pub codecs: Vec<(MethodTag, usize, Codec)>,
    pub generators: BTreeMap<GeneratorAlgo, Model>,
    /// `(rate_bits, λ)` used per DPLC codec.
    pub lambdas: Vec<(MethodTag, usize, f64)>,
}

fn cell_id(method: MethodTag, bits: usize) -> u64 {
    let ordinal = MethodTag::ALL.iter().position(|m| *m == method).expect("listed") as u64;
    (ordinal << 32) | bits as u64
}

/// Seed of the codec trained for `method` at `bits` under a sweep seed.
pub fn cell_seed(seed: u64, method: MethodTag, bits: usize) -> u64 {
    rng::derive_seed(seed, stream::INIT, (1 << 40) + cell_id(method, bits))
}

/// Checkpoint stem of one sweep cell, e.g. `dplc-wpp-r4`.
pub fn cell_name(method: MethodTag, bits: usize) -> String {
    format!("{method}-r{bits}")
}

/// Checkpoint stem of a generator run, e.g. `generator-wpp`.
pub fn generator_name(algo: GeneratorAlgo) -> String {
    format!("generator-{}", algo.name())
}

fn cell_checkpoint(plan: &SweepPlan, name: &str) -> Option<PathBuf> {
    plan.store.as_ref().map(|d| d.join(format!("{name}.ckpt")))
}

fn obtain_codec(
    plan: &SweepPlan,
    name: &str,
    train: impl FnOnce(&RunOptions) -> Result<(Codec, u64)>,
) -> Result<(Codec, u64)> {
    let path = cell_checkpoint(plan, name);
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let ckpt = load_checkpoint(p)?;
        return Ok((Codec::from_checkpoint(&ckpt)?, ckpt.iteration));
    }
    if !plan.train_missing {
        return Err(Error::Checkpoint(format!("missing checkpoint for {name}")));
    }
    let opts = RunOptions {
        abort_checkpoint: path.as_ref().map(|p| p.with_extension("diverged.ckpt")),
        config_fingerprint: plan.run_id.clone(),
        log_every: plan.log_every,
    };
    let (codec, iters) = train(&opts)?;
    if let Some(p) = &path {
        save_checkpoint(&codec.to_checkpoint(&plan.run_id, iters, plan.seed), p)?;
    }
    Ok((codec, iters))
}

struct EvalContext<'a> {
    test: &'a Tensor,
    reference: GaussianStats,
    embedder: Box<dyn Embed>,
    settings: &'a EvalSettings,
    seed: u64,
}

impl EvalContext<'_> {
    fn metrics(&self, codec: &Codec, samples: &Tensor, cell: u64) -> Result<(f64, f64, f64, f64)> {
        let mut r = rng::substream(self.seed, stream::EVAL, cell << 2);
        let x = head(self.test, self.settings.n_eval)?;
        let mse = eval_mse(codec, &x, x.rows(), &mut r)?;
        let mut r = rng::substream(self.seed, stream::EVAL, (cell << 2) | 1);
        let rec = reconstruct_all(codec, &x, &mut r)?;
        let rfid = eval_fid_surrogate(&self.reference, &rec, self.embedder.as_ref())?;
        let sfid = eval_fid_surrogate(&self.reference, samples, self.embedder.as_ref())?;
        let mut r = rng::substream(self.seed, stream::EVAL, (cell << 2) | 2);
        let pv = eval_pv(codec, &x, self.settings.pv_codes, self.settings.pv_draws, &mut r)?;
        Ok((mse, rfid.max(0.0), sfid.max(0.0), pv))
    }
}

/// Samples of a codec's decoder on uniformly random codes.
fn codec_samples(codec: &Codec, n: usize, seed: u64, cell: u64) -> Result<Tensor> {
    let mut r = rng::substream(seed, stream::EVAL, (cell << 2) | 3);
    let bits: Vec<f64> = (0..n * codec.rate_bits)
        .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let codes = Tensor::new(vec![n, codec.rate_bits], bits);
    chunked(&codes, |c| codec.decode(c, &mut r))
}

/// Trains (or loads) every method at every rate and evaluates it on
/// `test`.
///
/// The CAE runs first because their test MSE sets the rate-dependent
/// weights of the DPLC and GC codecs.
pub fn run_rate_sweep(plan: &SweepPlan, train: &mut DatasetHandle, test: &Tensor) -> Result<SweepOutcome> {
    plan.validate()?;
    if test.rows() < 2 {
        return Err(Error::Dataset("evaluation set needs at least two samples".into()));
    }
    let embedder = default_embedder(&plan.arch.data_shape)?;
    let ctx = EvalContext {
        test,
        reference: embed_and_fit(&head(test, plan.eval.n_eval)?, embedder.as_ref())?,
        embedder,
        settings: &plan.eval,
        seed: plan.seed,
    };
    let n_samples = test.rows().min(plan.eval.n_eval);
    let mut records: BTreeMap<(MethodTag, usize), MetricsRecord> = BTreeMap::new();
    let mut codecs = Vec::new();
    let mut lambdas = Vec::new();
    let mut record = |method: MethodTag, bits: usize, iteration: u64, m: (f64, f64, f64, f64), secs: f64| -> Result<()> {
        let r = MetricsRecord {
            run_id: plan.run_id.clone(),
            method: method.as_str().into(),
            rate_bpp: plan.rate_bpp(bits)?,
            iteration,
            mse: m.0,
            rfid_surrogate: m.1,
            sfid_surrogate: m.2,
            pv: m.3,
            wall_seconds: secs,
        };
        info!("{} R={bits}: mse {:.5} rfid {:.5} sfid {:.5} pv {:.3e}", r.method, r.mse, r.rfid_surrogate, r.sfid_surrogate, r.pv);
        records.insert((method, bits), r);
        Ok(())
    };

    let mut cae_table = Vec::new();
    if plan.needs_cae() {
        for &bits in &plan.rates_bits {
            let t0 = Instant::now();
            let mut cfg = plan.cae.clone();
            cfg.seed = cell_seed(plan.seed, MethodTag::Cae, bits);
            let (codec, iters) = obtain_codec(plan, &cell_name(MethodTag::Cae, bits), |opts| {
                let run = train_cae(train, bits, &plan.arch, &plan.prior, &cfg, opts)?;
                Ok((run.codec, cfg.iterations))
            })?;
            let cell = cell_id(MethodTag::Cae, bits);
            let samples = codec_samples(&codec, n_samples, plan.seed, cell)?;
            let m = ctx.metrics(&codec, &samples, cell)?;
            cae_table.push((bits as f64, m.0));
            if plan.methods.contains(&MethodTag::Cae) {
                record(MethodTag::Cae, bits, iters, m, t0.elapsed().as_secs_f64())?;
            }
            codecs.push((MethodTag::Cae, bits, codec));
        }
    }
    let weight = |base: f64, bits: usize| lambda_schedule(bits as f64, &cae_table, base, plan.lambda.reference_bits as f64);

    let mut generators = BTreeMap::new();
    for &method in &plan.methods {
        let Some(algo) = method.generator_algo() else { continue };
        let t0 = Instant::now();
        let gen_path = cell_checkpoint(plan, &generator_name(algo));
        let generator = match gen_path.as_ref().filter(|p| p.exists()) {
            Some(p) => load_checkpoint(p)?.model(Role::Generator)?,
            None if plan.train_missing => {
                let cfg = &plan.generator[&algo];
                let opts = RunOptions {
                    abort_checkpoint: gen_path.as_ref().map(|p| p.with_extension("diverged.ckpt")),
                    config_fingerprint: plan.run_id.clone(),
                    log_every: plan.log_every,
                };
                let run = train_generator(algo, train, &plan.arch, plan.prior.clone(), cfg, &opts)?;
                if let Some(p) = &gen_path {
                    save_checkpoint(&run.state.checkpoint(&plan.run_id, cfg.seed), p)?;
                }
                run.state.generator.model
            }
            None => return Err(Error::Checkpoint(format!("missing generator checkpoint for {}", algo.name()))),
        };
        let mut generator = generator;
        generator.set_training(false);
        let gen_secs = t0.elapsed().as_secs_f64();
        let z = plan
            .prior
            .sample_with(n_samples, &mut rng::substream(plan.seed, stream::PRIOR, 1 << 40))?
            .into_tensor();
        let samples = chunked(&z, |c| generator.infer(c))?;
        for &bits in &plan.rates_bits {
            let t0 = Instant::now();
            let lambda = match plan.lambda.mmd_override {
                Some(l) => l,
                None => weight(plan.lambda.mmd_base, bits)?,
            };
            let mut cfg = plan.codec.clone();
            cfg.lambda_mmd = lambda;
            cfg.seed = cell_seed(plan.seed, method, bits);
            let (codec, iters) = obtain_codec(plan, &cell_name(method, bits), |opts| {
                let run = train_codec(&generator, bits, train, &plan.arch, &plan.prior, &cfg, opts)?;
                Ok((run.codec, cfg.iterations))
            })?;
            let m = ctx.metrics(&codec, &samples, cell_id(method, bits))?;
            let secs = t0.elapsed().as_secs_f64() + if bits == plan.rates_bits[0] { gen_secs } else { 0.0 };
            record(method, bits, iters, m, secs)?;
            lambdas.push((method, bits, lambda));
            codecs.push((method, bits, codec));
        }
        generators.insert(algo, generator);
    }

    if plan.methods.contains(&MethodTag::Gc) {
        for &bits in &plan.rates_bits {
            let t0 = Instant::now();
            let mut cfg = plan.gc.clone();
            cfg.lambda_adv = weight(plan.lambda.gc_base, bits)?;
            cfg.seed = cell_seed(plan.seed, MethodTag::Gc, bits);
            let (codec, iters) = obtain_codec(plan, &cell_name(MethodTag::Gc, bits), |opts| {
                let run = train_gc(train, bits, &plan.arch, &plan.prior, &cfg, opts)?;
                Ok((run.codec, cfg.iterations))
            })?;
            let cell = cell_id(MethodTag::Gc, bits);
            let samples = codec_samples(&codec, n_samples, plan.seed, cell)?;
            let m = ctx.metrics(&codec, &samples, cell)?;
            record(MethodTag::Gc, bits, iters, m, t0.elapsed().as_secs_f64())?;
            lambdas.push((MethodTag::Gc, bits, cfg.lambda_adv));
            codecs.push((MethodTag::Gc, bits, codec));
        }
    }

    let report = SweepReport {
        records: records.into_values().collect(),
    };
    report.validate()?;
    Ok(SweepOutcome {
        report,
        codecs,
        generators,
        lambdas,
    })
}
