//! The discrete code: center sets, nearest-neighbor and straight-through
//! quantization, rate accounting, and the constructions behind the
//! rate-distortion guarantee (Lloyd-fitted centers, hypercube partitions,
//! and resampling from the prior restricted to a quantization cell).

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{PriorFamily, PriorSpec};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

/// Proposal budget per draw for rejection sampling inside a cell.
pub const DEFAULT_REJECTION_CAP: usize = 1_000_000;

/// Default temperature of the soft assignment used for gradients.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CodeMode {
    /// Each of `sites` coordinates is quantized independently to {-1, 1}.
    SignCorners { sites: usize },
    /// Nearest neighbor among explicit vectors.
    ExplicitCenters { centers: Vec<Vec<f64>> },
    /// `[0, 1]^m` split into `2^(k m)` cubes of edge `2^-k`.
    Hypercube { dim: usize, per_dim_bits: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeSpec {
    mode: CodeMode,
}

impl CodeSpec {
    pub fn sign_corners(sites: usize) -> Self {
        Self {
            mode: CodeMode::SignCorners { sites },
        }
    }

    pub fn explicit(centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = centers.first().map(Vec::len).unwrap_or(0);
        if centers.is_empty() || d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(invalid("centers must be a nonempty list of equal-length vectors"));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(invalid(format!("centers {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            mode: CodeMode::ExplicitCenters { centers },
        })
    }

    pub fn mode(&self) -> &CodeMode {
        &self.mode
    }

    /// Dimensionality of the embedding space.
    pub fn dim(&self) -> usize {
        match &self.mode {
            CodeMode::SignCorners { sites } => *sites,
            CodeMode::ExplicitCenters { centers } => centers[0].len(),
            CodeMode::Hypercube { dim, .. } => *dim,
        }
    }

    /// Number of independently quantized sites per sample.
    pub fn sites(&self) -> usize {
        match &self.mode {
            CodeMode::SignCorners { sites } => *sites,
            _ => 1,
        }
    }

    /// Code rate in bits per sample.
    pub fn rate_bits(&self) -> f64 {
        match &self.mode {
            CodeMode::SignCorners { sites } => *sites as f64,
            CodeMode::ExplicitCenters { centers } => (centers.len() as f64).log2(),
            CodeMode::Hypercube { dim, per_dim_bits } => (dim * per_dim_bits) as f64,
        }
    }

    /// Total number of code words, when it fits in a `u128`.
    pub fn num_centers(&self) -> Option<u128> {
        match &self.mode {
            CodeMode::SignCorners { sites } => 1u128.checked_shl(*sites as u32),
            CodeMode::ExplicitCenters { centers } => Some(centers.len() as u128),
            CodeMode::Hypercube { dim, per_dim_bits } => 1u128.checked_shl((dim * per_dim_bits) as u32),
        }
    }

    /// Scalar levels per site for product quantizers.
    fn scalar_levels(&self) -> Option<Vec<f64>> {
        match &self.mode {
            CodeMode::SignCorners { .. } => Some(vec![-1.0, 1.0]),
            CodeMode::Hypercube { per_dim_bits, .. } => {
                let cells = 1usize << per_dim_bits;
                Some((0..cells).map(|j| (j as f64 + 0.5) / cells as f64).collect())
            }
            CodeMode::ExplicitCenters { .. } => None,
        }
    }

    /// Center vector of a single-index code word.
    pub fn center(&self, index: usize) -> Result<Vec<f64>> {
        match &self.mode {
            CodeMode::ExplicitCenters { centers } => centers
                .get(index)
                .cloned()
                .ok_or_else(|| invalid(format!("center index {index} out of range"))),
            CodeMode::Hypercube { dim, per_dim_bits } => {
                let cells = 1usize << per_dim_bits;
                let cells_total = cells.checked_pow(*dim as u32).unwrap_or(usize::MAX);
                if index >= cells_total {
                    return Err(invalid(format!("center index {index} out of range")));
                }
                Ok(hypercube_cells(index, *dim, cells)
                    .into_iter()
                    .map(|c| (c as f64 + 0.5) / cells as f64)
                    .collect())
            }
            CodeMode::SignCorners { sites } => {
                if *sites >= 64 || index >> sites != 0 {
                    return Err(invalid(format!("center index {index} out of range")));
                }
                Ok(sign_bits(index as u64, *sites))
            }
        }
    }

    /// All center vectors (only sensible for small codes).
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        let n = self
            .num_centers()
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| invalid("code book too large to enumerate"))?;
        (0..n as usize).map(|i| self.center(i)).collect()
    }

    /// Converts per-site symbols to a single code-word index.
    pub fn pack(&self, symbols: &[usize]) -> Result<usize> {
        match &self.mode {
            CodeMode::SignCorners { sites } => {
                if *sites >= 64 {
                    return Err(invalid("sign-corner code too wide to pack into an index"));
                }
                Ok(symbols.iter().enumerate().fold(0, |acc, (j, &s)| acc | (s << j)))
            }
            _ => Ok(symbols[0]),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Bit `j` of a sign-corner index selects `+1` for coordinate `j`.
fn sign_bits(index: u64, sites: usize) -> Vec<f64> {
    (0..sites)
        .map(|j| if (index >> j) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Per-dimension cell coordinates of a hypercube index, first dim major.
fn hypercube_cells(mut index: usize, dim: usize, cells: usize) -> Vec<usize> {
    let mut out = vec![0; dim];
    for slot in out.iter_mut().rev() {
        *slot = index % cells;
        index /= cells;
    }
    out
}

/// Nearest scalar level with ties to the lowest index.
fn nearest_level(x: f64, levels: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, &l) in levels.iter().enumerate() {
        let d = (x - l) * (x - l);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn nearest_center(z: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Output of quantizing a batch.
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    /// `[b * sites]` symbols; `symbols[i * sites + j]` is the level (or
    /// center) index chosen for site `j` of sample `i`.
    pub symbols: Vec<usize>,
    pub sites: usize,
    /// Center vectors, `[b, dim]`.
    pub embedded: Tensor,
    /// Straight-through node: forward value equals `embedded` exactly,
    /// gradients follow the soft assignment.
    pub surrogate: Option<Var>,
}

impl QuantizationResult {
    pub fn len(&self) -> usize {
        self.embedded.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_symbols(&self, i: usize) -> &[usize] {
        &self.symbols[i * self.sites..(i + 1) * self.sites]
    }

    /// Code-word index per sample (single-site codes, or sign-corner codes
    /// narrower than 64 bits).
    pub fn indices(&self, spec: &CodeSpec) -> Result<Vec<usize>> {
        (0..self.len()).map(|i| spec.pack(self.sample_symbols(i))).collect()
    }
}

/// Nearest-neighbor quantization under the Euclidean norm; equidistant
/// candidates resolve to the lowest index.
pub fn hard_quantize(z: &Tensor, spec: &CodeSpec) -> Result<QuantizationResult> {
    if z.shape().len() != 2 {
        return Err(invalid(format!("expected a [batch, dim] tensor, got {:?}", z.shape())));
    }
    spec.check_dim(z.row_len())?;
    let b = z.rows();
    let d = spec.dim();
    let mut symbols = Vec::with_capacity(b * spec.sites());
    let mut embedded = Vec::with_capacity(b * d);
    match &spec.mode {
        CodeMode::SignCorners { .. } => {
            for &x in z.data() {
                let s = usize::from(x > 0.0);
                symbols.push(s);
                embedded.push(if s == 1 { 1.0 } else { -1.0 });
            }
        }
        CodeMode::Hypercube { dim, per_dim_bits } => {
            let cells = 1usize << per_dim_bits;
            let levels = spec.scalar_levels().expect("hypercube has levels");
            for i in 0..b {
                let mut index = 0usize;
                for &x in z.row(i) {
                    // ceil(x * cells) - 1 sends boundaries to the lower cell
                    let c = ((x * cells as f64).ceil() as isize - 1).clamp(0, cells as isize - 1) as usize;
                    // ... except outside [0,1], where the nearest level decides
                    let c = if (0.0..=1.0).contains(&x) { c } else { nearest_level(x, &levels) };
                    index = index * cells + c;
                    embedded.push(levels[c]);
                }
                debug_assert_eq!(embedded.len(), (i + 1) * dim);
                symbols.push(index);
            }
        }
        CodeMode::ExplicitCenters { centers } => {
            for i in 0..b {
                let j = nearest_center(z.row(i), centers);
                symbols.push(j);
                embedded.extend_from_slice(&centers[j]);
            }
        }
    }
    Ok(QuantizationResult {
        symbols,
        sites: spec.sites(),
        embedded: Tensor::new(vec![b, d], embedded),
        surrogate: None,
    })
}

/// Soft assignment: the softmax(-‖z - c‖² / τ)-weighted average of centers.
pub fn soft_assignment(z: &Var, spec: &CodeSpec, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    spec.check_dim(z.shape()[1])?;
    if let Some(levels) = spec.scalar_levels() {
        // Per-coordinate softmax over scalar levels.
        let zv = z.value();
        let min_d = zv.map(|x| levels.iter().map(|l| (x - l) * (x - l)).fold(f64::INFINITY, f64::min));
        let shift = Var::constant(min_d);
        let mut num: Option<Var> = None;
        let mut den: Option<Var> = None;
        for &l in &levels {
            let w = z.add_scalar(-l).square().sub(&shift).scale(-1.0 / temperature).exp();
            let wl = w.scale(l);
            num = Some(match num {
                Some(n) => n.add(&wl),
                None => wl,
            });
            den = Some(match den {
                Some(d) => d.add(&w),
                None => w,
            });
        }
        Ok(num.expect("levels nonempty").div(&den.expect("levels nonempty")))
    } else {
        let CodeMode::ExplicitCenters { centers } = &spec.mode else {
            unreachable!()
        };
        let (b, k, d) = (z.shape()[0], centers.len(), spec.dim());
        let c = Tensor::from_rows(centers);
        let ct = Var::constant(c.transpose());
        let cc = Var::constant(Tensor::new(
            vec![k],
            centers.iter().map(|c| c.iter().map(|x| x * x).sum()).collect(),
        ));
        let zz = z.square().sum_cols().broadcast_cols(k);
        let dist = zz.sub(&z.matmul(&ct).scale(2.0)).add(&cc.broadcast_rows(b));
        let row_min: Vec<f64> = (0..b)
            .map(|i| dist.value().row(i).iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let shift = Var::constant(Tensor::new(vec![b, 1], row_min)).broadcast_cols(k);
        let w = dist.sub(&shift).scale(-1.0 / temperature).exp();
        let norm = w.sum_cols().broadcast_cols(k);
        let p = w.div(&norm);
        let out = p.matmul(&Var::constant(c));
        debug_assert_eq!(out.shape(), &[b, d]);
        Ok(out)
    }
}

/// Straight-through quantization: forward value is exactly
/// [`hard_quantize`]; the backward pass differentiates
/// [`soft_assignment`] at `temperature`.
pub fn soft_quantize(z: &Var, spec: &CodeSpec, temperature: f64) -> Result<QuantizationResult> {
    let soft = soft_assignment(z, spec, temperature)?;
    let mut hard = hard_quantize(z.value(), spec)?;
    hard.surrogate = Some(Var::straight_through(hard.embedded.clone(), &soft));
    Ok(hard)
}

/// Code bits per pixel. `code_dims` multiply to the number of binary code
/// sites (a zero entry means a zero-rate code); `pixel_dims` multiply to
/// the number of pixels (or scalar data dimensions for vector data).
pub fn bitrate_bpp(code_dims: &[usize], pixel_dims: &[usize]) -> Result<f64> {
    if code_dims.is_empty() || pixel_dims.is_empty() || pixel_dims.contains(&0) {
        return Err(invalid("bitrate needs nonempty code shape and positive pixel shape"));
    }
    let bits: usize = code_dims.iter().product();
    let pixels: usize = pixel_dims.iter().product();
    Ok(bits as f64 / pixels as f64)
}

/// Lloyd iteration output.
#[derive(Clone, Debug)]
pub struct LloydFit {
    pub spec: CodeSpec,
    /// Mean squared quantization error after initialization and after each
    /// iteration.
    pub error_history: Vec<f64>,
}

pub const LLOYD_MAX_ITERS: usize = 100;
pub const LLOYD_REL_TOL: f64 = 1e-6;

/// Lloyd (k-means) centers from k-means++ initialization.
pub fn fit_centers(samples: &Tensor, count: usize, seed: u64) -> Result<LloydFit> {
    let n = samples.rows();
    let d = samples.row_len();
    if count == 0 {
        return Err(invalid("need at least one center"));
    }
    if n < count {
        return Err(invalid(format!("{n} samples cannot support {count} centers")));
    }
    let mut rng = rng::substream(seed, stream::CENTERS, 0);
    let rows: Vec<&[f64]> = (0..n).map(|i| samples.row(i)).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![rows.choose(&mut rng).expect("n > 0").to_vec()];
    let mut best: Vec<f64> = rows.iter().map(|r| sq(r, &centers[0])).collect();
    while centers.len() < count {
        let total: f64 = best.iter().sum();
        if total <= 0.0 {
            return Err(invalid("fewer distinct samples than requested centers"));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in best.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        if best[pick] == 0.0 {
            continue;
        }
        let c = rows[pick].to_vec();
        for (b, r) in best.iter_mut().zip(&rows) {
            *b = b.min(sq(r, &c));
        }
        centers.push(c);
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut err = 0.0;
        let a = rows
            .iter()
            .map(|r| {
                let j = nearest_center(r, centers);
                err += sq(r, &centers[j]);
                j
            })
            .collect();
        (a, err / n as f64)
    };

    let (mut labels, mut err) = assign(&centers);
    let mut history = vec![err];
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; count];
        let mut counts = vec![0usize; count];
        for (r, &j) in rows.iter().zip(&labels) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        for j in 0..count {
            // empty cells keep their center
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (l, e) = assign(&centers);
        labels = l;
        let prev = err;
        err = e;
        history.push(err);
        if prev <= 0.0 || (prev - err) / prev < LLOYD_REL_TOL {
            break;
        }
    }
    Ok(LloydFit {
        spec: CodeSpec::explicit(centers)?,
        error_history: history,
    })
}

/// Regular grid quantizer on `[0, 1]^m` with `rate_bits = k m`.
pub fn build_hypercube_quantizer(dim: usize, rate_bits: usize) -> Result<CodeSpec> {
    if dim == 0 {
        return Err(invalid("hypercube dimension must be positive"));
    }
    if rate_bits % dim != 0 {
        return Err(invalid(format!("rate {rate_bits} is not a multiple of dimension {dim}")));
    }
    let per_dim_bits = rate_bits / dim;
    if per_dim_bits >= usize::BITS as usize / 2 {
        return Err(invalid("rate too large for the hypercube grid"));
    }
    Ok(CodeSpec {
        mode: CodeMode::Hypercube { dim, per_dim_bits },
    })
}

/// Worst-case distance between two points of one hypercube cell,
/// `sqrt(m) 2^(-R/m)`.
pub fn hypercube_distance_bound(dim: usize, rate_bits: usize) -> f64 {
    (dim as f64).sqrt() * 2f64.powf(-(rate_bits as f64) / dim as f64)
}

/// Draws from the prior conditioned on the cell of `symbols`.
///
/// Hypercube cells under the uniform prior and sign-corner orthants under
/// the standard normal are sampled directly; everything else uses rejection
/// from the prior with at most `cap` proposals.
pub fn resample_cell(
    spec: &CodeSpec,
    symbols: &[usize],
    prior: &PriorSpec,
    rng: &mut Rng,
    cap: usize,
) -> Result<Vec<f64>> {
    if prior.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: prior.dim(),
        });
    }
    if symbols.len() != spec.sites() {
        return Err(invalid("symbol count does not match the code's sites"));
    }
    match (&spec.mode, prior.family()) {
        (CodeMode::Hypercube { dim, per_dim_bits }, PriorFamily::UniformHypercube) => {
            let cells = 1usize << per_dim_bits;
            if symbols[0] >= cells.saturating_pow(*dim as u32) {
                return Err(invalid("cell index out of range"));
            }
            let edge = 1.0 / cells as f64;
            Ok(hypercube_cells(symbols[0], *dim, cells)
                .into_iter()
                .map(|c| (c as f64 + rng.random::<f64>()) * edge)
                .map(|x| x.max(f64::MIN_POSITIVE))
                .collect())
        }
        (CodeMode::SignCorners { .. }, PriorFamily::StandardNormal) => {
            let mut out = vec![0.0; symbols.len()];
            prior.draw_into(rng, &mut out);
            for (x, &s) in out.iter_mut().zip(symbols) {
                if s > 1 {
                    return Err(invalid("sign-corner symbols are 0 or 1"));
                }
                // the cell of -1 includes 0; |x| > 0 almost surely
                *x = if s == 1 { x.abs() } else { -x.abs() };
            }
            Ok(out)
        }
        _ => {
            if let Some(n) = spec.num_centers() {
                if spec.sites() == 1 && symbols[0] as u128 >= n {
                    return Err(invalid("cell index out of range"));
                }
            }
            let mut z = vec![0.0; prior.dim()];
            for _ in 0..cap {
                prior.draw_into(rng, &mut z);
                let q = hard_quantize(&Tensor::new(vec![1, z.len()], z.clone()), spec)?;
                if q.symbols == symbols {
                    return Ok(z);
                }
            }
            Err(Error::Sampling(format!(
                "no proposal landed in cell {symbols:?} within {cap} draws"
            )))
        }
    }
}

/// Single-index form of [`resample_cell`] with its own seeded stream.
pub fn voronoi_resample(spec: &CodeSpec, index: usize, prior: &PriorSpec, seed: u64) -> Result<Vec<f64>> {
    let symbols = match &spec.mode {
        CodeMode::SignCorners { sites } => {
            if *sites >= 64 || (index as u64) >> sites != 0 {
                return Err(invalid(format!("index {index} out of range")));
            }
            (0..*sites).map(|j| (index >> j) & 1).collect()
        }
        _ => vec![index],
    };
    let mut rng = rng::substream(seed, stream::RESAMPLE, index as u64);
    resample_cell(spec, &symbols, prior, &mut rng, DEFAULT_REJECTION_CAP)
}

/// Quantizes every row of `z` and replaces it with a fresh draw from its
/// cell: the stochastic map `B(q(z))` of the distribution-preserving
/// construction.
pub fn quantize_and_resample(z: &Tensor, spec: &CodeSpec, prior: &PriorSpec, rng: &mut Rng) -> Result<Tensor> {
    let q = hard_quantize(z, spec)?;
    let mut out = Vec::with_capacity(z.len());
    for i in 0..q.len() {
        out.extend(resample_cell(spec, q.sample_symbols(i), prior, rng, DEFAULT_REJECTION_CAP)?);
    }
    Ok(Tensor::new(vec![q.len(), spec.dim()], out))
}

/// Mean Euclidean distance `‖z - q(z)‖` over a batch.
pub fn mean_quantization_distance(z: &Tensor, spec: &CodeSpec) -> Result<f64> {
    let q = hard_quantize(z, spec)?;
    let total: f64 = (0..z.rows())
        .map(|i| {
            z.row(i)
                .iter()
                .zip(q.embedded.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / z.rows() as f64)
}
