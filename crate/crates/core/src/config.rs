//! Experiment configuration: one TOML document describing the data, the
//! networks, every training stage, the rate grid and the evaluation sizes.
//!
//! Unknown keys are rejected and errors name the offending key path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_image_dataset, make_synthetic_dataset, DatasetHandle, DatasetKind, MixtureParams, PriorFamily, PriorSpec,
    RingParams,
};
use crate::error::{io_err, Error, Result};
use crate::evaluation::{EvalSettings, LambdaRule, MethodTag, SweepPlan};
use crate::models::{ArchFamily, ArchParams, DEFAULT_MLP_WIDTH};
use crate::rng::{derive_seed, stream};
use crate::training::{GeneratorAlgo, Scale, Stage, TrainConfig, TOY_GAMMA};

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 3] = ["toy2d", "celeba-paper", "lsun-paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Master seed. Dataset draws, initializations and every stage seed
    /// derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub rates: RateSection,
    pub evaluation: EvalSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Number of samples drawn for synthetic sources.
    #[serde(default)]
    pub n_samples: usize,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussians evenly spaced on a circle.
    Ring { components: usize, radius: f64, std: f64 },
    GaussianMixture { mixture: MixtureParams },
    Rings { rings: RingParams },
    ImageFolder { path: PathBuf, resolution: usize },
}

impl DatasetSource {
    pub fn kind(&self) -> DatasetKind {
        match self {
            DatasetSource::Ring { components, radius, std } => {
                DatasetKind::GaussianMixture(MixtureParams::ring(*components, *radius, *std))
            }
            DatasetSource::GaussianMixture { mixture } => DatasetKind::GaussianMixture(mixture.clone()),
            DatasetSource::Rings { rings } => DatasetKind::Rings(rings.clone()),
            DatasetSource::ImageFolder { path, resolution } => DatasetKind::ImageFolder {
                path: path.clone(),
                resolution: *resolution,
            },
        }
    }

    fn data_shape(&self) -> Vec<usize> {
        match self {
            DatasetSource::ImageFolder { resolution, .. } => vec![3, *resolution, *resolution],
            DatasetSource::GaussianMixture { mixture } => vec![mixture.dim()],
            _ => vec![2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: ArchFamily,
    pub latent_dim: usize,
    pub width: usize,
    pub residual_blocks: usize,
    pub prior: PriorFamily,
}

/// Per-algorithm generator settings plus the codec stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default)]
    pub wae_mmd: Option<TrainConfig>,
    #[serde(default)]
    pub wgan_gp: Option<TrainConfig>,
    #[serde(default)]
    pub wpp: Option<TrainConfig>,
    pub codec: TrainConfig,
    pub cae: TrainConfig,
    pub gc: TrainConfig,
    pub lambda: LambdaRule,
    #[serde(default)]
    pub log_every: u64,
}

impl TrainerSection {
    pub fn generator(&self, algo: GeneratorAlgo) -> Option<&TrainConfig> {
        match algo {
            GeneratorAlgo::WaeMmd => self.wae_mmd.as_ref(),
            GeneratorAlgo::WganGp => self.wgan_gp.as_ref(),
            GeneratorAlgo::Wpp => self.wpp.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    /// Code sizes in bits, strictly increasing.
    pub bits: Vec<usize>,
    pub methods: Vec<MethodTag>,
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn shortened(cfg: TrainConfig, iterations: u64, batch: usize) -> TrainConfig {
    TrainConfig {
        schedule: cfg.schedule.scaled(iterations, cfg.iterations),
        iterations,
        batch_size: batch,
        ..cfg
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy2d" => Ok(Self::toy2d()),
            "celeba-paper" => Ok(Self::paper(Scale::Celeba)),
            "lsun-paper" => Ok(Self::paper(Scale::Lsun)),
            other => Err(config_err(
                "preset",
                format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            )),
        }
    }

    /// Desk-scale setting on the 8-mode ring: short runs that finish in
    /// minutes on one core.
    fn toy2d() -> Self {
        let toy = |stage| TrainConfig::preset(stage, Scale::Toy);
        Self {
            run_id: "toy2d".into(),
            seed: 7,
            output_dir: "runs".into(),
            dataset: DatasetSection {
                source: DatasetSource::Ring {
                    components: 8,
                    radius: 2.0,
                    std: 0.1,
                },
                n_samples: 50_000,
                test_fraction: 0.1,
            },
            model: ModelSection {
                family: ArchFamily::Mlp,
                latent_dim: 2,
                width: DEFAULT_MLP_WIDTH,
                residual_blocks: 1,
                prior: PriorFamily::StandardNormal,
            },
            trainer: TrainerSection {
                wae_mmd: Some(shortened(toy(Stage::Generator(GeneratorAlgo::WaeMmd)), 1500, 64)),
                wgan_gp: Some(shortened(toy(Stage::Generator(GeneratorAlgo::WganGp)), 1500, 64)),
                wpp: Some(shortened(toy(Stage::Generator(GeneratorAlgo::Wpp)), 1500, 64)),
                codec: shortened(toy(Stage::Codec), 1500, 64),
                cae: shortened(toy(Stage::Cae), 1500, 64),
                gc: shortened(toy(Stage::Gc), 600, 64),
                lambda: LambdaRule {
                    mmd_base: 600.0,
                    gc_base: TOY_GAMMA,
                    reference_bits: 1,
                    mmd_override: None,
                },
                log_every: 0,
            },
            rates: RateSection {
                bits: vec![0, 1, 2, 4, 8],
                methods: vec![MethodTag::DplcWpp, MethodTag::Cae, MethodTag::Gc],
            },
            evaluation: EvalSettings {
                n_eval: 5000,
                ..EvalSettings::default()
            },
        }
    }

    /// Published 64x64 setting; expects the images under `data/<name>`.
    fn paper(scale: Scale) -> Self {
        let lsun = scale == Scale::Lsun;
        let cfg = |stage| TrainConfig::preset(stage, scale);
        // code maps are 4x4, so k channels carry 16 k bits
        let mut bits = vec![0, 32, 128, 512, 2048];
        if lsun {
            bits.push(4096);
        }
        Self {
            run_id: if lsun { "lsun-paper" } else { "celeba-paper" }.into(),
            seed: 0,
            output_dir: "runs".into(),
            dataset: DatasetSection {
                source: DatasetSource::ImageFolder {
                    path: if lsun { "data/lsun-bedrooms" } else { "data/celeba" }.into(),
                    resolution: 64,
                },
                n_samples: 0,
                test_fraction: 0.1,
            },
            model: ModelSection {
                family: ArchFamily::ConvDcgan,
                latent_dim: if lsun { 512 } else { 128 },
                width: 64,
                residual_blocks: if lsun { 4 } else { 2 },
                prior: PriorFamily::StandardNormal,
            },
            trainer: TrainerSection {
                wae_mmd: Some(cfg(Stage::Generator(GeneratorAlgo::WaeMmd))),
                wgan_gp: Some(cfg(Stage::Generator(GeneratorAlgo::WganGp))),
                wpp: Some(cfg(Stage::Generator(GeneratorAlgo::Wpp))),
                codec: cfg(Stage::Codec),
                cae: cfg(Stage::Cae),
                gc: cfg(Stage::Gc),
                lambda: LambdaRule {
                    mmd_base: if lsun { 800.0 } else { 150.0 },
                    gc_base: if lsun { 7.5e-5 } else { 2.5e-5 },
                    reference_bits: if lsun { 4096 } else { 2048 },
                    mmd_override: None,
                },
                log_every: 500,
            },
            rates: RateSection {
                bits,
                methods: MethodTag::ALL.to_vec(),
            },
            evaluation: EvalSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            config_err(if key == "." { String::new() } else { key }, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(config_err("run_id", "use letters, digits, '-', '_' or '.'"));
        }
        let d = &self.dataset;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(config_err("dataset.test_fraction", "must lie strictly between 0 and 1"));
        }
        match &d.source {
            DatasetSource::ImageFolder { resolution, .. } => {
                if self.model.family != ArchFamily::ConvDcgan {
                    return Err(config_err("model.family", "image data needs the conv-dcgan family"));
                }
                if *resolution < 8 || !resolution.is_power_of_two() {
                    return Err(config_err("dataset.source.resolution", "must be a power of two of at least 8"));
                }
            }
            source => {
                if self.model.family != ArchFamily::Mlp {
                    return Err(config_err("model.family", "vector data needs the mlp family"));
                }
                if d.n_samples < 4 {
                    return Err(config_err("dataset.n_samples", "synthetic sources need at least 4 samples"));
                }
                if let DatasetSource::Ring { components, radius, std } = source {
                    if *components == 0 || !(*radius > 0.0) || !(*std > 0.0) {
                        return Err(config_err("dataset.source", "ring needs components, radius and std > 0"));
                    }
                }
                if let DatasetSource::GaussianMixture { mixture } = source {
                    mixture.validate().map_err(|e| config_err("dataset.source.mixture", e.to_string()))?;
                }
            }
        }
        let m = &self.model;
        if m.latent_dim == 0 || m.width == 0 || m.residual_blocks == 0 {
            return Err(config_err("model", "latent_dim, width and residual_blocks must be positive"));
        }
        let arch = self.arch();
        let side = arch.code_side().map_err(|e| config_err("model", e.to_string()))?;
        arch.noise_channels().map_err(|e| config_err("model.latent_dim", e.to_string()))?;

        let mut stages: Vec<(&str, &TrainConfig)> = vec![
            ("trainer.codec", &self.trainer.codec),
            ("trainer.cae", &self.trainer.cae),
            ("trainer.gc", &self.trainer.gc),
        ];
        for (key, cfg) in [
            ("trainer.wae_mmd", &self.trainer.wae_mmd),
            ("trainer.wgan_gp", &self.trainer.wgan_gp),
            ("trainer.wpp", &self.trainer.wpp),
        ] {
            if let Some(c) = cfg {
                stages.push((key, c));
            }
        }
        for (prefix, cfg) in stages {
            cfg.validate().map_err(|e| match e {
                Error::Config { key, message } => config_err(format!("{prefix}.{key}"), message),
                other => config_err(prefix, other.to_string()),
            })?;
        }

        let r = &self.rates;
        if r.bits.is_empty() || r.bits.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("rates.bits", "must be nonempty and strictly increasing"));
        }
        if let Some(b) = r.bits.iter().find(|&&b| b % (side * side) != 0) {
            return Err(config_err("rates.bits", format!("{b} bits do not fill a {side}x{side} code map")));
        }
        if r.methods.is_empty() {
            return Err(config_err("rates.methods", "list at least one method"));
        }
        for method in &r.methods {
            if let Some(algo) = method.generator_algo() {
                if self.trainer.generator(algo).is_none() {
                    return Err(config_err(
                        format!("trainer.{}", algo.name().replace('-', "_")),
                        format!("required by method {method}"),
                    ));
                }
            }
        }
        let l = &self.trainer.lambda;
        if l.mmd_override.is_none() && !r.bits.contains(&l.reference_bits) {
            return Err(config_err("trainer.lambda.reference_bits", "must be one of rates.bits"));
        }
        if !(l.mmd_base >= 0.0) || !(l.gc_base >= 0.0) {
            return Err(config_err("trainer.lambda", "weights must be nonnegative"));
        }
        let e = &self.evaluation;
        if e.n_eval < 2 || e.pv_codes == 0 || e.pv_draws < 2 {
            return Err(config_err("evaluation", "need n_eval >= 2, pv_codes >= 1 and pv_draws >= 2"));
        }
        Ok(())
    }

    pub fn data_shape(&self) -> Vec<usize> {
        self.dataset.source.data_shape()
    }

    /// Spatial extent that code bits are divided by to give bpp.
    pub fn pixel_dims(&self) -> Vec<usize> {
        let s = self.data_shape();
        if s.len() == 3 {
            s[1..].to_vec()
        } else {
            s
        }
    }

    pub fn arch(&self) -> ArchParams {
        ArchParams {
            family: self.model.family,
            data_shape: self.data_shape(),
            latent_dim: self.model.latent_dim,
            code_channels: 0,
            residual_blocks: self.model.residual_blocks,
            width: self.model.width,
            noise_dim: self.model.latent_dim,
        }
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.model.prior, self.model.latent_dim)
    }

    /// Loads (or draws) the data and splits off the evaluation part.
    pub fn load_datasets(&self) -> Result<(DatasetHandle, DatasetHandle)> {
        let seed = derive_seed(self.seed, stream::DATASET, 0);
        let all = match &self.dataset.source {
            DatasetSource::ImageFolder { path, resolution } => load_image_dataset(path, *resolution, seed)?,
            source => make_synthetic_dataset(source.kind(), self.dataset.n_samples, seed)?,
        };
        all.split(self.dataset.test_fraction)
    }

    /// Generator settings for `algo` with the seed derived from the
    /// experiment seed.
    pub fn generator_config(&self, algo: GeneratorAlgo) -> Result<TrainConfig> {
        let mut cfg = self
            .trainer
            .generator(algo)
            .cloned()
            .ok_or_else(|| config_err(format!("trainer.{}", algo.name().replace('-', "_")), "section missing"))?;
        cfg.seed = derive_seed(self.seed, stream::INIT, 10 + algo as u64);
        Ok(cfg)
    }

    pub fn sweep_plan(&self, store: Option<PathBuf>) -> Result<SweepPlan> {
        let mut generator = BTreeMap::new();
        for algo in [GeneratorAlgo::WaeMmd, GeneratorAlgo::WganGp, GeneratorAlgo::Wpp] {
            if self.trainer.generator(algo).is_some() {
                generator.insert(algo, self.generator_config(algo)?);
            }
        }
        Ok(SweepPlan {
            run_id: self.run_id.clone(),
            methods: self.rates.methods.clone(),
            rates_bits: self.rates.bits.clone(),
            pixel_dims: self.pixel_dims(),
            arch: self.arch(),
            prior: self.prior()?,
            generator,
            codec: self.trainer.codec.clone(),
            cae: self.trainer.cae.clone(),
            gc: self.trainer.gc.clone(),
            lambda: self.trainer.lambda.clone(),
            eval: self.evaluation.clone(),
            seed: self.seed,
            store,
            train_missing: true,
            log_every: self.trainer.log_every,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{name}");
            assert_eq!(back.fingerprint(), c.fingerprint());
        }
        assert!(ExperimentConfig::preset("mnist").is_err());
    }

    #[test]
    fn unknown_key_is_reported_with_its_path() {
        let text = ExperimentConfig::preset("toy2d").unwrap().to_toml().replace("lr_critic", "lr_critc");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { key, message }) => {
                assert!(key.starts_with("trainer."), "{key}");
                assert!(message.contains("lr_critc"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_validation_keys_are_prefixed() {
        let mut c = ExperimentConfig::preset("toy2d").unwrap();
        c.trainer.codec.batch_size = 1;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert!(key.starts_with("trainer.codec."), "{key}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_rate_must_be_on_the_grid() {
        let mut c = ExperimentConfig::preset("toy2d").unwrap();
        c.trainer.lambda.reference_bits = 3;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "trainer.lambda.reference_bits"));
        c.trainer.lambda.mmd_override = Some(10.0);
        c.validate().unwrap();
    }

    #[test]
    fn image_grids_fill_the_code_map() {
        let c = ExperimentConfig::preset("celeba-paper").unwrap();
        assert_eq!(c.pixel_dims(), vec![64, 64]);
        assert_eq!(c.arch().code_side().unwrap(), 4);
        let mut bad = c.clone();
        bad.rates.bits = vec![0, 8];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::preset("toy2d").unwrap();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
