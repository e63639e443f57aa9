//! Python bindings. Batches cross the boundary as lists of rows
//! (`list[list[float]]`); image samples are flattened per row in CHW order.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dplc::checkpoint::load_checkpoint;
use dplc::config::ExperimentConfig;
use dplc::data::{make_synthetic_dataset, DatasetKind, MixtureParams, PriorFamily};
use dplc::divergences::{frechet_between, imq_kernel, mmd_u_statistic, IdentityEmbedder, KernelSpec};
use dplc::evaluation::run_rate_sweep;
use dplc::models::{Model, Role};
use dplc::quantization::{bitrate_bpp as core_bitrate_bpp, build_hypercube_quantizer, hard_quantize, CodeSpec};
use dplc::rng;
use dplc::training::{train_generator as core_train_generator, Codec as CoreCodec, GeneratorAlgo, RunOptions};
use dplc::Tensor;

fn to_py(e: dplc::Error) -> PyErr {
    match e {
        dplc::Error::InvalidArgument(_) | dplc::Error::DimensionMismatch { .. } | dplc::Error::Config { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(Tensor::from_rows(&rows))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_family(name: &str) -> PyResult<PriorFamily> {
    match name {
        "standard-normal" => Ok(PriorFamily::StandardNormal),
        "uniform-hypercube" => Ok(PriorFamily::UniformHypercube),
        other => Err(PyValueError::new_err(format!(
            "unknown prior `{other}` (standard-normal or uniform-hypercube)"
        ))),
    }
}

fn parse_algo(name: &str) -> PyResult<GeneratorAlgo> {
    match name {
        "wae" | "wae-mmd" => Ok(GeneratorAlgo::WaeMmd),
        "wgan-gp" => Ok(GeneratorAlgo::WganGp),
        "wpp" => Ok(GeneratorAlgo::Wpp),
        other => Err(PyValueError::new_err(format!("unknown algorithm `{other}` (wae, wgan-gp, wpp)"))),
    }
}

/// Latent prior `P_Z`.
#[pyclass(name = "PriorSpec", module = "dplc_py", frozen)]
struct PyPrior {
    inner: dplc::data::PriorSpec,
}

#[pymethods]
impl PyPrior {
    #[new]
    #[pyo3(signature = (dim, family = "standard-normal"))]
    fn new(dim: usize, family: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dplc::data::PriorSpec::new(parse_family(family)?, dim).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let b = dplc::data::sample_prior(&self.inner, n, seed).map_err(to_py)?;
        Ok(rows(b.data()))
    }

    fn __repr__(&self) -> String {
        format!("PriorSpec(dim={}, family={:?})", self.inner.dim(), self.inner.family())
    }
}

/// Experiment configuration (see the `dplc config` command for the layout).
#[pyclass(name = "ExperimentConfig", module = "dplc_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::preset(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn run_id(&self) -> String {
        self.inner.run_id.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn rates_bits(&self) -> Vec<usize> {
        self.inner.rates.bits.clone()
    }

    /// Train and test samples as row lists.
    fn datasets(&self) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (train, test) = self.inner.load_datasets().map_err(to_py)?;
        Ok((rows(train.samples()), rows(test.samples())))
    }
}

/// A trained generator `G`.
#[pyclass(name = "Generator", module = "dplc_py", frozen)]
struct PyGenerator {
    model: Model,
}

#[pymethods]
impl PyGenerator {
    /// Loads the generator entry of any checkpoint that has one.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let mut model = load_checkpoint(&path).and_then(|c| c.model(Role::Generator)).map_err(to_py)?;
        model.set_training(false);
        Ok(Self { model })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.arch().input_shape.iter().product()
    }

    fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    fn generate(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.model.infer(&tensor(z)?).map_err(to_py)?;
        Ok(rows(&x))
    }

    #[pyo3(signature = (n, seed, family = "standard-normal"))]
    fn sample(&self, n: usize, seed: u64, family: &str) -> PyResult<Vec<Vec<f64>>> {
        let prior = dplc::data::PriorSpec::new(parse_family(family)?, self.latent_dim()).map_err(to_py)?;
        let z = dplc::data::sample_prior(&prior, n, seed).map_err(to_py)?.into_tensor();
        Ok(rows(&self.model.infer(&z).map_err(to_py)?))
    }
}

/// A trained codec: deterministic encoder, stochastic decoder.
#[pyclass(name = "Codec", module = "dplc_py", frozen)]
struct PyCodec {
    inner: CoreCodec,
}

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(to_py)?;
        Ok(Self {
            inner: CoreCodec::from_checkpoint(&ckpt).map_err(to_py)?,
        })
    }

    #[getter]
    fn rate_bits(&self) -> usize {
        self.inner.rate_bits
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind).to_lowercase()
    }

    #[getter]
    fn lambda_mmd(&self) -> f64 {
        self.inner.lambda
    }

    /// Codes in `{-1, 1}`, one row per sample.
    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&tensor(x)?).map_err(to_py)?))
    }

    fn decode(&self, codes: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let codes = if self.inner.rate_bits == 0 {
            Tensor::zeros(&[codes.len(), 0])
        } else {
            tensor(codes)?
        };
        let mut r = rng::substream(seed, rng::stream::NOISE, 0);
        Ok(rows(&self.inner.decode(&codes, &mut r).map_err(to_py)?))
    }

    fn reconstruct(&self, x: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let x = tensor(x)?;
        let code = self.inner.encode(&x).map_err(to_py)?;
        let mut r = rng::substream(seed, rng::stream::NOISE, 0);
        Ok(rows(&self.inner.decode(&code, &mut r).map_err(to_py)?))
    }
}

/// `C / (C + ‖a - b‖²)`.
#[pyfunction]
fn imq(a: Vec<f64>, b: Vec<f64>, scale: f64) -> PyResult<f64> {
    imq_kernel(&a, &b, &KernelSpec::new(scale).map_err(to_py)?).map_err(to_py)
}

/// Unbiased MMD estimate with the IMQ kernel; `scale` defaults to `2 d`.
#[pyfunction]
#[pyo3(signature = (x, y, scale = None))]
fn mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, scale: Option<f64>) -> PyResult<f64> {
    let (x, y) = (tensor(x)?, tensor(y)?);
    let c = scale.unwrap_or(2.0 * x.row_len() as f64);
    mmd_u_statistic(&x, &y, &KernelSpec::new(c).map_err(to_py)?).map_err(to_py)
}

/// Fréchet distance between Gaussian fits of two sample sets.
#[pyfunction]
fn frechet(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    frechet_between(&tensor(x)?, &tensor(y)?, &IdentityEmbedder).map_err(to_py)
}

#[pyfunction]
fn bitrate_bpp(code_dims: Vec<usize>, pixel_dims: Vec<usize>) -> PyResult<f64> {
    core_bitrate_bpp(&code_dims, &pixel_dims).map_err(to_py)
}

/// Nearest-center quantization. With `rate_bits` the centers are the
/// hypercube cell centers on `[0, 1]^d`; otherwise each coordinate is
/// snapped to `{-1, 1}`. Returns `(symbols, embedded)`.
#[pyfunction]
#[pyo3(signature = (z, rate_bits = None))]
fn quantize(z: Vec<Vec<f64>>, rate_bits: Option<usize>) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let z = tensor(z)?;
    let spec = match rate_bits {
        Some(r) => build_hypercube_quantizer(z.row_len(), r).map_err(to_py)?,
        None => CodeSpec::sign_corners(z.row_len()),
    };
    let q = hard_quantize(&z, &spec).map_err(to_py)?;
    let symbols = (0..q.len()).map(|i| q.sample_symbols(i).to_vec()).collect();
    Ok((symbols, rows(&q.embedded)))
}

/// Samples from the evenly spaced Gaussian ring.
#[pyfunction]
#[pyo3(signature = (n, seed, components = 8, radius = 2.0, std = 0.1))]
fn ring_dataset(n: usize, seed: u64, components: usize, radius: f64, std: f64) -> PyResult<Vec<Vec<f64>>> {
    let kind = DatasetKind::GaussianMixture(MixtureParams::ring(components, radius, std));
    let ds = make_synthetic_dataset(kind, n, seed).map_err(to_py)?;
    Ok(rows(ds.samples()))
}

/// Quantize-and-resample distortion per rate against the bound.
#[pyfunction]
#[pyo3(signature = (m, kmax = 6, n = 100_000, seed = 0))]
fn verify_theorem1<'py>(py: Python<'py>, m: usize, kmax: usize, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let ks: Vec<usize> = (1..=kmax).collect();
    let r = py
        .detach(|| dplc::evaluation::verify_theorem1(m, &ks, n, seed))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("m", r.m)?;
    d.set_item("rates", r.rates.clone())?;
    d.set_item("distortions", r.distortions.clone())?;
    d.set_item("bounds", r.bounds.clone())?;
    d.set_item("within_bound", r.within_bound.clone())?;
    d.set_item("slope", r.slope)?;
    d.set_item("lloyd_distortions", r.lloyd_distortions.clone())?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

/// Trains a generator under `config` and returns it.
#[pyfunction]
fn train_generator(py: Python<'_>, config: &PyConfig, algo: &str) -> PyResult<PyGenerator> {
    let algo = parse_algo(algo)?;
    let cfg = config.inner.clone();
    let model = py
        .detach(move || -> dplc::Result<Model> {
            let (mut train, _) = cfg.load_datasets()?;
            let tc = cfg.generator_config(algo)?;
            let run = core_train_generator(algo, &mut train, &cfg.arch(), cfg.prior()?, &tc, &RunOptions::default())?;
            let mut g = run.state.generator.model;
            g.set_training(false);
            Ok(g)
        })
        .map_err(to_py)?;
    Ok(PyGenerator { model })
}

/// Runs the rate sweep of `config` and returns one dict per metrics row.
/// Checkpoints are reused from (and written to) `store` when given.
#[pyfunction]
#[pyo3(signature = (config, store = None))]
fn run_sweep<'py>(py: Python<'py>, config: &PyConfig, store: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let report = py
        .detach(move || -> dplc::Result<_> {
            let plan = cfg.sweep_plan(store)?;
            let (mut train, test) = cfg.load_datasets()?;
            Ok(run_rate_sweep(&plan, &mut train, test.samples())?.report)
        })
        .map_err(to_py)?;
    report
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("run_id", &r.run_id)?;
            d.set_item("method", &r.method)?;
            d.set_item("rate_bpp", r.rate_bpp)?;
            d.set_item("iteration", r.iteration)?;
            d.set_item("mse", r.mse)?;
            d.set_item("rfid_surrogate", r.rfid_surrogate)?;
            d.set_item("sfid_surrogate", r.sfid_surrogate)?;
            d.set_item("pv", r.pv)?;
            d.set_item("wall_seconds", r.wall_seconds)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
pub fn dplc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrior>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyCodec>()?;
    m.add_function(wrap_pyfunction!(imq, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(frechet, m)?)?;
    m.add_function(wrap_pyfunction!(bitrate_bpp, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(ring_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem1, m)?)?;
    m.add_function(wrap_pyfunction!(train_generator, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
