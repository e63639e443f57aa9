//! Optimization loops: WAE-MMD, WGAN-GP and Wasserstein++ generator
//! training, the rate-constrained codec stage on a frozen generator, and
//! the compressive-autoencoder and generative-compression baselines.
//!
//! Every step function takes its random inputs explicitly, so a step can
//! be replayed or compared against another algorithm on identical draws.
//! The `train_*` drivers produce those inputs from seeded substreams.

use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointEntry};
use crate::data::{DatasetHandle, NoiseSpec, PriorSpec};
use crate::divergences::{critic_loss_with, generator_adversarial_loss, mmd_u_var, CriticLoss, KernelSpec};
use crate::error::{invalid, Error, Result};
use crate::models::{build_model, rate_encode, ArchParams, ArchSpec, Model, Role};
use crate::optim::{adam_update, AdamState, LrSchedule};
use crate::quantization::{hard_quantize, CodeSpec, DEFAULT_TEMPERATURE};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorAlgo {
    WaeMmd,
    WganGp,
    Wpp,
}

impl GeneratorAlgo {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorAlgo::WaeMmd => "wae-mmd",
            GeneratorAlgo::WganGp => "wgan-gp",
            GeneratorAlgo::Wpp => "wpp",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != GeneratorAlgo::WganGp
    }

    pub fn has_critic(self) -> bool {
        self != GeneratorAlgo::WaeMmd
    }
}

/// Optimizer settings, coefficients, schedule and seed of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam rate of the autoencoder encoder `F`, or of `E` and `B` in the
    /// codec stages.
    pub lr_encoder: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_mmd: f64,
    pub lambda_gp: f64,
    /// Weight of the adversarial term in Wasserstein++.
    pub gamma: f64,
    /// Weight of the adversarial divergence in the generative-compression
    /// baseline.
    #[serde(default)]
    pub lambda_adv: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub iterations: u64,
    #[serde(default = "LrSchedule::constant")]
    pub schedule: LrSchedule,
    /// Ignored inside an experiment config, where stage seeds derive from
    /// the experiment seed.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// IMQ scale; `None` picks `2 m σ²` from the prior.
    #[serde(default)]
    pub kernel_scale: Option<f64>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

/// Which published setting a preset follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Celeba,
    Lsun,
    Toy,
}

/// Training stages with presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generator(GeneratorAlgo),
    Codec,
    Cae,
    Gc,
}

pub const TOY_ITERATIONS: u64 = 5_000;
pub const TOY_BATCH: usize = 128;
pub const TOY_GAMMA: f64 = 1e-3;

impl TrainConfig {
    pub fn preset(stage: Stage, scale: Scale) -> Self {
        let wae = Self {
            lr_encoder: 1e-3,
            lr_generator: 1e-3,
            lr_critic: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_mmd: 100.0,
            lambda_gp: 10.0,
            gamma: 0.0,
            lambda_adv: 0.0,
            n_critic: 5,
            batch_size: 256,
            iterations: 41_000,
            schedule: LrSchedule::step(vec![22_000, 38_000], 0.4),
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            kernel_scale: None,
        };
        let mut c = match stage {
            Stage::Generator(GeneratorAlgo::WaeMmd) => wae,
            Stage::Generator(GeneratorAlgo::WganGp) => Self {
                lr_generator: 1e-4,
                lr_critic: 1e-4,
                beta2: 0.9,
                lambda_mmd: 0.0,
                batch_size: 64,
                iterations: 100_000,
                schedule: LrSchedule::constant(),
                ..wae
            },
            Stage::Generator(GeneratorAlgo::Wpp) | Stage::Gc => Self {
                lr_encoder: 3e-4,
                lr_generator: 3e-4,
                lr_critic: 1e-4,
                gamma: 2.5e-5,
                iterations: 25_000,
                schedule: LrSchedule::step(vec![15_000, 21_000], 0.4),
                ..wae
            },
            Stage::Codec => Self { lambda_mmd: 150.0, ..wae },
            Stage::Cae => Self { lambda_mmd: 0.0, ..wae },
        };
        if stage == Stage::Gc {
            c.lambda_mmd = 0.0;
            c.lambda_adv = 2.5e-5;
        }
        match scale {
            Scale::Celeba => {}
            Scale::Lsun => {
                c.schedule = c.schedule.scaled(2, 1);
                c.iterations *= 2;
                match stage {
                    Stage::Generator(GeneratorAlgo::WaeMmd) | Stage::Generator(GeneratorAlgo::Wpp) => c.lambda_mmd = 300.0,
                    Stage::Codec => c.lambda_mmd = 800.0,
                    _ => {}
                }
                if stage == Stage::Generator(GeneratorAlgo::Wpp) {
                    c.gamma = 1e-4;
                }
                if stage == Stage::Gc {
                    c.lambda_adv = 7.5e-5;
                }
            }
            Scale::Toy => {
                c.schedule = c.schedule.scaled(TOY_ITERATIONS, c.iterations);
                c.iterations = TOY_ITERATIONS;
                c.batch_size = TOY_BATCH;
                if stage == Stage::Generator(GeneratorAlgo::Wpp) {
                    c.gamma = TOY_GAMMA;
                }
                if stage == Stage::Gc {
                    c.lambda_adv = TOY_GAMMA;
                }
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config { key: key.into(), message };
        for (key, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_generator", self.lr_generator),
            ("lr_critic", self.lr_critic),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(bad("gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        for (key, v) in [
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_gp", self.lambda_gp),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be nonnegative, got {v}")));
            }
        }
        if self.n_critic == 0 {
            return Err(bad("n_critic", "must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "must be at least 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(bad("temperature", "must be positive".into()));
        }
        if let Some(c) = self.kernel_scale {
            KernelSpec::new(c).map_err(|e| bad("kernel_scale", e.to_string()))?;
        }
        Ok(())
    }

    pub fn kernel(&self, prior: &PriorSpec) -> KernelSpec {
        match self.kernel_scale {
            Some(c) => KernelSpec::new(c).expect("validated"),
            None => KernelSpec::for_prior(prior),
        }
    }
}

/// Loss components of one outer iteration. Terms an algorithm does not
/// use are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    /// Mean unsquared Euclidean reconstruction error.
    pub distortion: f64,
    pub mmd: f64,
    /// Generator-side adversarial loss `-mean f(·)`.
    pub adversarial: f64,
    /// Critic loss of the last critic update (including the penalty).
    pub critic: f64,
    pub penalty: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.distortion, self.mmd, self.adversarial, self.critic, self.penalty]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Random inputs of one critic iteration.
#[derive(Clone, Debug)]
pub struct CriticDraw {
    pub x: Tensor,
    /// Prior draws (WGAN-GP and Wasserstein++) or decoder noise (GC).
    pub z: Tensor,
    /// Latent mixing weights of Wasserstein++.
    pub eta: Vec<f64>,
    /// Gradient-penalty interpolation weights.
    pub nu: Vec<f64>,
}

fn uniform_vec(seed: u64, stream_id: u64, counter: u64, n: usize) -> Vec<f64> {
    let mut r = rng::substream(seed, stream_id, counter);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Draws the data batch and the prior / mixing samples for counter `c`.
pub fn draw_critic_inputs(
    dataset: &mut DatasetHandle,
    prior: &PriorSpec,
    b: usize,
    seed: u64,
    counter: u64,
) -> Result<CriticDraw> {
    let x = dataset.next_batch(b)?.into_tensor();
    let z = prior.sample_with(b, &mut rng::substream(seed, stream::PRIOR, counter))?.into_tensor();
    Ok(CriticDraw {
        x,
        z,
        eta: uniform_vec(seed, stream::MIXING, 2 * counter, b),
        nu: uniform_vec(seed, stream::MIXING, 2 * counter + 1, b),
    })
}

fn values(grads: Vec<Var>) -> Vec<Tensor> {
    grads.into_iter().map(|g| g.value().clone()).collect()
}

fn flatten(x: &Var) -> Var {
    let b = x.shape()[0];
    x.reshape(&[b, x.shape()[1..].iter().product()])
}

/// `mean_i ‖x_i - y_i‖`.
pub fn mean_distance(x: &Var, y: &Var) -> Var {
    flatten(x).sub(&flatten(y)).row_norms().mean()
}

/// A model with its optimizer.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub model: Model,
    pub opt: AdamState,
}

impl Trainable {
    pub fn new(model: Model) -> Self {
        let opt = AdamState::new(model.params());
        Self { model, opt }
    }

    fn step(&mut self, grads: &[Tensor], lr: f64, cfg: &TrainConfig) -> Result<()> {
        let mut params = self.model.params().to_vec();
        adam_update(&mut params, grads, &mut self.opt, lr, cfg.beta1, cfg.beta2)?;
        self.model.set_params(params)
    }

    fn entry(&self) -> CheckpointEntry {
        CheckpointEntry {
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }
}

fn critic_closure<'a>(critic: &'a Model, params: &'a [Var]) -> impl Fn(&Var) -> Var + 'a {
    move |x: &Var| {
        critic
            .forward_mode(params, x, false)
            .expect("critic input shape validated at construction")
            .output
    }
}

/// One critic update on fixed real and fake batches.
fn critic_update(
    critic: &mut Trainable,
    x: &Tensor,
    x_hat: &Tensor,
    nu: &[f64],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<CriticLoss> {
    let params = critic.model.bind();
    let (loss, g) = {
        let f = critic_closure(&critic.model, &params);
        let loss = critic_loss_with(&f, x, x_hat, cfg.lambda_gp, nu)?;
        let g = values(grad(&loss.total, &params, false));
        (loss, g)
    };
    critic.step(&g, lr, cfg)?;
    Ok(loss)
}

/// Models and optimizer state of a generator run.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub algo: GeneratorAlgo,
    pub generator: Trainable,
    pub encoder: Option<Trainable>,
    pub critic: Option<Trainable>,
    pub prior: PriorSpec,
    pub kernel: KernelSpec,
    /// Completed outer iterations.
    pub iteration: u64,
}

impl GeneratorState {
    /// Builds fresh models for `algo` from the preset architectures.
    pub fn new(algo: GeneratorAlgo, arch: &ArchParams, prior: PriorSpec, cfg: &TrainConfig) -> Result<Self> {
        if prior.dim() != arch.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: arch.latent_dim,
                got: prior.dim(),
            });
        }
        let mk = |role: Role, salt: u64| -> Result<Trainable> {
            let model = build_model(role, ArchSpec::for_role(role, arch)?, rng::derive_seed(cfg.seed, stream::INIT, salt))?;
            Ok(Trainable::new(model))
        };
        Ok(Self {
            algo,
            generator: mk(Role::Generator, 0)?,
            encoder: if algo.has_encoder() { Some(mk(Role::WaeEncoder, 1)?) } else { None },
            critic: if algo.has_critic() { Some(mk(Role::Critic, 2)?) } else { None },
            kernel: cfg.kernel(&prior),
            prior,
            iteration: 0,
        })
    }

    /// Wraps already-built models (e.g. hand-constructed test networks).
    pub fn from_models(
        algo: GeneratorAlgo,
        generator: Model,
        encoder: Option<Model>,
        critic: Option<Model>,
        prior: PriorSpec,
        kernel: KernelSpec,
    ) -> Result<Self> {
        if algo.has_encoder() != encoder.is_some() || algo.has_critic() != critic.is_some() {
            return Err(invalid(format!("wrong set of models for {}", algo.name())));
        }
        Ok(Self {
            algo,
            generator: Trainable::new(generator),
            encoder: encoder.map(Trainable::new),
            critic: critic.map(Trainable::new),
            prior,
            kernel,
            iteration: 0,
        })
    }

    pub fn checkpoint(&self, config_fingerprint: &str, seed: u64) -> Checkpoint {
        let mut entries = vec![self.generator.entry()];
        entries.extend(self.encoder.iter().map(Trainable::entry));
        entries.extend(self.critic.iter().map(Trainable::entry));
        Checkpoint {
            entries,
            config_fingerprint: config_fingerprint.into(),
            iteration: self.iteration,
            seed,
            metadata: serde_json::json!({ "algo": self.algo.name() }),
        }
    }

    fn lr(&self, cfg: &TrainConfig, base: f64) -> f64 {
        cfg.schedule.lr_at(base, self.iteration)
    }
}

/// Updates `θ` on `(1-γ) L_d + γ L_WGAN` and `φ` on
/// `(1-γ)(L_d + λ L_MMD)`, using `z̄ = F(x)`.
fn autoencoder_update(
    st: &mut GeneratorState,
    x: &Tensor,
    z: &Tensor,
    gamma: f64,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let enc = st.encoder.as_mut().ok_or_else(|| invalid("no encoder in this run"))?;
    let fp = enc.model.bind();
    let gp = st.generator.model.bind();
    let f_out = enc.model.forward(&fp, &Var::constant(x.clone()))?;
    let z_bar = f_out.output;
    let g_out = st.generator.model.forward(&gp, &z_bar)?;
    let x_rec = g_out.output;
    let l_d = mean_distance(&Var::constant(x.clone()), &x_rec);
    let l_mmd = mmd_u_var(&Var::constant(z.clone()), &z_bar, &st.kernel)?;
    let mut record = LossRecord {
        iteration: st.iteration,
        distortion: l_d.item(),
        mmd: l_mmd.item(),
        ..Default::default()
    };
    let theta_obj = match &st.critic {
        Some(critic) => {
            let cp = critic.model.frozen();
            let f = critic_closure(&critic.model, &cp);
            let l_wgan = generator_adversarial_loss(&f, &x_rec)?;
            record.adversarial = l_wgan.item();
            l_d.scale(1.0 - gamma).add(&l_wgan.scale(gamma))
        }
        None => l_d.scale(1.0 - gamma),
    };
    let phi_obj = l_d.add(&l_mmd.scale(cfg.lambda_mmd)).scale(1.0 - gamma);
    let g_theta = values(grad(&theta_obj, &gp, false));
    let g_phi = values(grad(&phi_obj, &fp, false));
    let lr_g = cfg.schedule.lr_at(cfg.lr_generator, st.iteration);
    let lr_f = cfg.schedule.lr_at(cfg.lr_encoder, st.iteration);
    st.generator.step(&g_theta, lr_g, cfg)?;
    let rows_g = st.generator.model.norm_rows(x.rows());
    st.generator.model.absorb_moments(&g_out.moments, &rows_g);
    let enc = st.encoder.as_mut().expect("checked above");
    enc.step(&g_phi, lr_f, cfg)?;
    let rows_f = enc.model.norm_rows(x.rows());
    enc.model.absorb_moments(&f_out.moments, &rows_f);
    Ok(record)
}

/// One WAE-MMD iteration on data `x` and prior draws `z`.
pub fn wae_mmd_step(st: &mut GeneratorState, x: &Tensor, z: &Tensor, cfg: &TrainConfig) -> Result<LossRecord> {
    let r = autoencoder_update(st, x, z, 0.0, cfg)?;
    st.iteration += 1;
    Ok(r)
}

/// One WGAN-GP generator update on `-mean f(G(z))`.
pub fn wgan_generator_step(st: &mut GeneratorState, latents: &Tensor, cfg: &TrainConfig) -> Result<LossRecord> {
    let critic = st.critic.as_ref().ok_or_else(|| invalid("no critic in this run"))?;
    let gp = st.generator.model.bind();
    let g_out = st.generator.model.forward(&gp, &Var::constant(latents.clone()))?;
    let cp = critic.model.frozen();
    let f = critic_closure(&critic.model, &cp);
    let loss = generator_adversarial_loss(&f, &g_out.output)?;
    let g = values(grad(&loss, &gp, false));
    let lr = st.lr(cfg, cfg.lr_generator);
    st.generator.step(&g, lr, cfg)?;
    let rows = st.generator.model.norm_rows(latents.rows());
    st.generator.model.absorb_moments(&g_out.moments, &rows);
    Ok(LossRecord {
        iteration: st.iteration,
        adversarial: loss.item(),
        ..Default::default()
    })
}

fn fake_batch(g: &Model, z: &Tensor) -> Result<Tensor> {
    Ok(g.forward(&g.frozen(), &Var::constant(z.clone()))?.output.value().clone())
}

/// `n_critic` critic updates on `G(z)` fakes followed by one generator
/// update on `gen_latents`.
pub fn wgan_gp_step(
    st: &mut GeneratorState,
    draws: &[CriticDraw],
    gen_latents: &Tensor,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let lr_c = st.lr(cfg, cfg.lr_critic);
    let mut last = None;
    for d in draws {
        let fake = fake_batch(&st.generator.model, &d.z)?;
        let critic = st.critic.as_mut().ok_or_else(|| invalid("no critic in this run"))?;
        last = Some(critic_update(critic, &d.x, &fake, &d.nu, cfg, lr_c)?);
    }
    let mut r = wgan_generator_step(st, gen_latents, cfg)?;
    if let Some(l) = last {
        r.critic = l.total.item();
        r.penalty = l.penalty;
    }
    st.iteration += 1;
    Ok(r)
}

/// One Wasserstein++ outer iteration: a critic update per draw on
/// `G(η z + (1-η) F(x))`, then the generator and encoder updates on the
/// last draw's `x` and `z`.
pub fn wpp_step(st: &mut GeneratorState, draws: &[CriticDraw], cfg: &TrainConfig) -> Result<LossRecord> {
    let last_draw = draws.last().ok_or_else(|| invalid("at least one critic draw is required"))?;
    if last_draw.x.rows() < 2 {
        return Err(invalid("Wasserstein++ needs batches of at least two samples"));
    }
    let lr_c = st.lr(cfg, cfg.lr_critic);
    let mut last = None;
    for d in draws {
        let enc = st.encoder.as_ref().ok_or_else(|| invalid("no encoder in this run"))?;
        let z_bar = enc.model.forward(&enc.model.frozen(), &Var::constant(d.x.clone()))?.output.value().clone();
        let m = z_bar.row_len();
        let mut mixed = Vec::with_capacity(z_bar.len());
        for i in 0..z_bar.rows() {
            let e = d.eta[i];
            mixed.extend(d.z.row(i).iter().zip(z_bar.row(i)).map(|(a, b)| e * a + (1.0 - e) * b));
        }
        let z_tilde = Tensor::new(vec![z_bar.rows(), m], mixed);
        let fake = fake_batch(&st.generator.model, &z_tilde)?;
        let critic = st.critic.as_mut().ok_or_else(|| invalid("no critic in this run"))?;
        last = Some(critic_update(critic, &d.x, &fake, &d.nu, cfg, lr_c)?);
    }
    let mut r = autoencoder_update(st, &last_draw.x, &last_draw.z, cfg.gamma, cfg)?;
    let l = last.expect("draws nonempty");
    r.critic = l.total.item();
    r.penalty = l.penalty;
    st.iteration += 1;
    Ok(r)
}

/// Where to leave the last good state if a run diverges.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub abort_checkpoint: Option<PathBuf>,
    pub config_fingerprint: String,
    /// Log a progress line every this many iterations (0 disables).
    pub log_every: u64,
}

fn params_finite(models: &[&Model]) -> bool {
    models.iter().all(|m| m.params().iter().all(Tensor::all_finite))
}

#[derive(Clone, Debug)]
pub struct GeneratorRun {
    pub state: GeneratorState,
    pub history: Vec<LossRecord>,
}

/// Runs the configured number of outer iterations of `algo`.
pub fn train_generator(
    algo: GeneratorAlgo,
    dataset: &mut DatasetHandle,
    arch: &ArchParams,
    prior: PriorSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<GeneratorRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if dataset.sample_shape() != &arch.data_shape[..] {
        return Err(invalid(format!(
            "dataset samples {:?} do not match the architecture's {:?}",
            dataset.sample_shape(),
            arch.data_shape
        )));
    }
    let mut st = GeneratorState::new(algo, arch, prior.clone(), cfg)?;
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    let per_iter = cfg.n_critic as u64 + 1;
    for t in 0..cfg.iterations {
        let good = st.clone();
        let base = t * per_iter;
        let record = match algo {
            GeneratorAlgo::WaeMmd => {
                let d = draw_critic_inputs(dataset, &prior, cfg.batch_size, cfg.seed, base)?;
                wae_mmd_step(&mut st, &d.x, &d.z, cfg)
            }
            GeneratorAlgo::WganGp => {
                let draws = (0..cfg.n_critic as u64)
                    .map(|k| draw_critic_inputs(dataset, &prior, cfg.batch_size, cfg.seed, base + k))
                    .collect::<Result<Vec<_>>>()?;
                let z = prior
                    .sample_with(cfg.batch_size, &mut rng::substream(cfg.seed, stream::PRIOR, base + cfg.n_critic as u64))?
                    .into_tensor();
                wgan_gp_step(&mut st, &draws, &z, cfg)
            }
            GeneratorAlgo::Wpp => {
                let draws = (0..cfg.n_critic as u64)
                    .map(|k| draw_critic_inputs(dataset, &prior, cfg.batch_size, cfg.seed, base + k))
                    .collect::<Result<Vec<_>>>()?;
                wpp_step(&mut st, &draws, cfg)
            }
        };
        let models: Vec<&Model> = std::iter::once(&st.generator.model)
            .chain(st.encoder.iter().map(|e| &e.model))
            .chain(st.critic.iter().map(|c| &c.model))
            .collect();
        let failure = match &record {
            Err(e) => Some(e.to_string()),
            Ok(r) if !r.is_finite() => Some(format!("non-finite loss {r:?}")),
            Ok(_) if !params_finite(&models) => Some("non-finite parameters".into()),
            Ok(_) => None,
        };
        if let Some(detail) = failure {
            return Err(abort(&good.checkpoint(&opts.config_fingerprint, cfg.seed), opts, t, detail));
        }
        let record = record.expect("checked above");
        if opts.log_every > 0 && (t + 1) % opts.log_every == 0 {
            info!(
                "{} iter {}: L_d {:.5} MMD {:.5} adv {:.5} critic {:.5}",
                algo.name(),
                t + 1,
                record.distortion,
                record.mmd,
                record.adversarial,
                record.critic
            );
        }
        history.push(record);
    }
    Ok(GeneratorRun { state: st, history })
}

fn abort(last_good: &Checkpoint, opts: &RunOptions, iteration: u64, detail: String) -> Error {
    if let Some(path) = &opts.abort_checkpoint {
        match save_checkpoint(last_good, path) {
            Ok(()) => warn!("run diverged; last good state written to {}", path.display()),
            Err(e) => warn!("run diverged and the last good state could not be saved: {e}"),
        }
    }
    Error::Diverged {
        iteration: iteration as usize,
        detail,
    }
}

/// `λ(R) = base · MSE_CAE(R) / MSE_CAE(R_ref)`, with `table` holding
/// `(rate, mse)` pairs. A rate missing from the table uses the nearest
/// tabulated rate.
pub fn lambda_schedule(rate: f64, mse_cae_table: &[(f64, f64)], base: f64, reference_rate: f64) -> Result<f64> {
    let exact = |r: f64| mse_cae_table.iter().find(|(x, _)| (x - r).abs() <= 1e-12 * r.abs().max(1.0));
    let (_, mse_ref) = exact(reference_rate).ok_or_else(|| invalid(format!("reference rate {reference_rate} missing from the table")))?;
    if !(*mse_ref > 0.0) {
        return Err(invalid("reference MSE must be positive"));
    }
    let mse = match exact(rate) {
        Some((_, m)) => *m,
        None => {
            let (r, m) = mse_cae_table
                .iter()
                .min_by(|a, b| (a.0 - rate).abs().total_cmp(&(b.0 - rate).abs()))
                .expect("table holds the reference rate");
            warn!("rate {rate} not in the CAE table; using the entry at {r}");
            *m
        }
    };
    Ok(base * mse / mse_ref)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    /// Rate-constrained `E`, `B` on a frozen generator.
    Dplc,
    /// `G`, `B`, `E` trained jointly for distortion only, no noise.
    Cae,
    /// `G`, `B`, `E` trained jointly with an adversarial divergence.
    Gc,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Dplc => "dplc",
            CodecKind::Cae => "cae",
            CodecKind::Gc => "gc",
        }
    }
}

/// A trained compressor `x -> G(B(E(x) ⊕ noise))`.
#[derive(Clone, Debug)]
pub struct Codec {
    pub kind: CodecKind,
    pub generator: Model,
    /// `None` for a zero-rate code.
    pub encoder: Option<Model>,
    pub mapper: Model,
    /// Binary code sites per sample (the rate in bits).
    pub rate_bits: usize,
    pub noise_dim: usize,
    /// Regularization weight the codec was trained with.
    pub lambda: f64,
    pub temperature: f64,
}

impl Codec {
    fn mapper_input_shape(&self) -> Vec<usize> {
        self.mapper.arch().input_shape.clone()
    }

    /// Hard sign-corner code, `[b, rate_bits]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            None => Ok(Tensor::zeros(&[x.rows(), 0])),
            Some(e) => {
                let out = e.infer(x)?;
                let flat = out.reshape(&[out.rows(), out.row_len()]);
                Ok(hard_quantize(&flat, &CodeSpec::sign_corners(self.rate_bits))?.embedded)
            }
        }
    }

    /// Decodes codes with explicit noise (`[b, noise_dim]`).
    pub fn decode_with(&self, code: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let b = code.rows();
        let mut cols = Vec::with_capacity(b * (self.rate_bits + self.noise_dim));
        for i in 0..b {
            cols.extend_from_slice(code.row(i));
            if self.noise_dim > 0 {
                cols.extend_from_slice(noise.row(i));
            }
        }
        let mut shape = vec![b];
        shape.extend(self.mapper_input_shape());
        let z_hat = self.mapper.infer(&Tensor::new(shape, cols))?;
        self.generator.infer(&z_hat)
    }

    /// Decodes with fresh `Uniform(0, 1)` noise from `rng`.
    pub fn decode(&self, code: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let noise = if self.noise_dim > 0 {
            NoiseSpec::new(self.noise_dim)?.sample_with(code.rows(), rng)?.into_tensor()
        } else {
            Tensor::zeros(&[code.rows(), 0])
        };
        self.decode_with(code, &noise)
    }

    /// The latent `B(E(x) ⊕ noise)`.
    pub fn latent(&self, code: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let b = code.rows();
        let noise = if self.noise_dim > 0 {
            NoiseSpec::new(self.noise_dim)?.sample_with(b, rng)?.into_tensor()
        } else {
            Tensor::zeros(&[b, 0])
        };
        let mut cols = Vec::new();
        for i in 0..b {
            cols.extend_from_slice(code.row(i));
            cols.extend_from_slice(noise.row(i));
        }
        let mut shape = vec![b];
        shape.extend(self.mapper_input_shape());
        self.mapper.infer(&Tensor::new(shape, cols))
    }

    pub fn to_checkpoint(&self, config_fingerprint: &str, iteration: u64, seed: u64) -> Checkpoint {
        let mut entries = vec![CheckpointEntry {
            model: self.generator.clone(),
            optimizer: None,
        }];
        entries.extend(self.encoder.iter().map(|m| CheckpointEntry {
            model: m.clone(),
            optimizer: None,
        }));
        entries.push(CheckpointEntry {
            model: self.mapper.clone(),
            optimizer: None,
        });
        Checkpoint {
            entries,
            config_fingerprint: config_fingerprint.into(),
            iteration,
            seed,
            metadata: serde_json::json!({
                "kind": self.kind,
                "rate_bits": self.rate_bits,
                "noise_dim": self.noise_dim,
                "lambda": self.lambda,
                "temperature": self.temperature,
                "generator_fingerprint": self.generator.fingerprint(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("codec metadata lacks `{k}`")));
        let kind: CodecKind =
            serde_json::from_value(field("kind")?.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let num = |k: &str| field(k).and_then(|v| v.as_f64().ok_or_else(|| Error::Checkpoint(format!("`{k}` is not a number"))));
        let rate_bits = num("rate_bits")? as usize;
        let mut generator = ckpt.model(Role::Generator)?;
        let mut mapper = ckpt.model(Role::Mapper)?;
        generator.set_training(false);
        mapper.set_training(false);
        let encoder = if rate_bits > 0 {
            let mut e = ckpt.model(Role::RateEncoder)?;
            e.set_training(false);
            Some(e)
        } else {
            None
        };
        Ok(Self {
            kind,
            generator,
            encoder,
            mapper,
            rate_bits,
            noise_dim: num("noise_dim")? as usize,
            lambda: num("lambda")?,
            temperature: num("temperature")?,
        })
    }
}

/// Architecture knobs of a codec at `rate_bits` on top of `base`.
pub fn codec_arch(base: &ArchParams, rate_bits: usize, noise_dim: usize) -> Result<ArchParams> {
    let mut p = base.clone();
    let side = p.code_side()?;
    if rate_bits % (side * side) != 0 {
        return Err(invalid(format!(
            "rate of {rate_bits} bits does not fill a {side}x{side} code map evenly"
        )));
    }
    p.code_channels = rate_bits / (side * side);
    p.noise_dim = noise_dim;
    p.noise_channels()?;
    Ok(p)
}

/// Joint state of the codec stages.
#[derive(Clone, Debug)]
pub struct CodecState {
    pub kind: CodecKind,
    pub generator: Trainable,
    /// `false` keeps the generator frozen in inference mode.
    pub train_generator: bool,
    pub encoder: Option<Trainable>,
    pub mapper: Trainable,
    pub critic: Option<Trainable>,
    pub rate_bits: usize,
    pub noise_dim: usize,
    pub kernel: KernelSpec,
    pub iteration: u64,
}

impl CodecState {
    /// `generator` is the frozen `G★` for DPLC; for the baselines it is the
    /// initial joint generator (built from `arch` when `None`).
    pub fn new(
        kind: CodecKind,
        generator: Option<Model>,
        arch: &ArchParams,
        rate_bits: usize,
        prior: &PriorSpec,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let noise_dim = if kind == CodecKind::Cae { 0 } else { prior.dim() };
        let p = codec_arch(arch, rate_bits, noise_dim)?;
        let seed_of = |salt: u64| rng::derive_seed(cfg.seed, stream::INIT, 16 + salt);
        let mk = |role: Role, salt: u64| -> Result<Model> { build_model(role, ArchSpec::for_role(role, &p)?, seed_of(salt)) };
        let mut generator = match (kind, generator) {
            (_, Some(g)) => g,
            (CodecKind::Dplc, None) => return Err(invalid("the DPLC codec stage needs a trained generator")),
            (_, None) => mk(Role::Generator, 0)?,
        };
        if generator.role() != Role::Generator {
            return Err(Error::RoleMismatch {
                expected: Role::Generator.name().into(),
                found: generator.role().name().into(),
            });
        }
        if generator.arch().latent_dim != prior.dim() {
            return Err(Error::DimensionMismatch {
                expected: prior.dim(),
                got: generator.arch().latent_dim,
            });
        }
        let train_generator = kind != CodecKind::Dplc;
        generator.set_training(train_generator);
        Ok(Self {
            kind,
            generator: Trainable::new(generator),
            train_generator,
            encoder: if rate_bits > 0 {
                Some(Trainable::new(mk(Role::RateEncoder, 1)?))
            } else {
                None
            },
            mapper: Trainable::new(mk(Role::Mapper, 2)?),
            critic: if kind == CodecKind::Gc {
                Some(Trainable::new(mk(Role::Critic, 3)?))
            } else {
                None
            },
            rate_bits,
            noise_dim,
            kernel: cfg.kernel(prior),
            iteration: 0,
        })
    }

    pub fn lambda(&self, cfg: &TrainConfig) -> f64 {
        match self.kind {
            CodecKind::Dplc => cfg.lambda_mmd,
            CodecKind::Cae => 0.0,
            CodecKind::Gc => cfg.lambda_adv,
        }
    }

    pub fn codec(&self, cfg: &TrainConfig) -> Codec {
        let freeze = |m: &Model| {
            let mut m = m.clone();
            m.set_training(false);
            m
        };
        Codec {
            kind: self.kind,
            generator: freeze(&self.generator.model),
            encoder: self.encoder.as_ref().map(|e| freeze(&e.model)),
            mapper: freeze(&self.mapper.model),
            rate_bits: self.rate_bits,
            noise_dim: self.noise_dim,
            lambda: self.lambda(cfg),
            temperature: cfg.temperature,
        }
    }

    fn reconstruct_constant(&self, x: &Tensor, noise: &Tensor, temperature: f64) -> Result<Tensor> {
        let e = self.encoder.as_ref().map(|e| (&e.model, e.model.frozen()));
        let enc = rate_encode(
            e.as_ref().map(|(m, p)| (*m, &p[..])),
            &Var::constant(x.clone()),
            noise,
            temperature,
            &self.mapper.model.arch().input_shape,
        )?;
        let z_hat = self.mapper.model.forward(&self.mapper.model.frozen(), &enc.mapper_input)?.output;
        let g = &self.generator.model;
        Ok(g.forward(&g.frozen(), &z_hat)?.output.value().clone())
    }
}

fn codec_noise(st: &CodecState, b: usize, seed: u64, counter: u64) -> Result<Tensor> {
    if st.noise_dim == 0 {
        return Ok(Tensor::zeros(&[b, 0]));
    }
    Ok(NoiseSpec::new(st.noise_dim)?
        .sample_with(b, &mut rng::substream(seed, stream::NOISE, counter))?
        .into_tensor())
}

/// One codec-stage iteration. `x`, `noise` and `z` feed the main update;
/// `critic_draws` (GC only) hold `(x, noise)` pairs in `x` and `z` with
/// the penalty weights in `nu`.
pub fn codec_step(
    st: &mut CodecState,
    x: &Tensor,
    noise: &Tensor,
    z: &Tensor,
    critic_draws: &[CriticDraw],
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let mut record = LossRecord {
        iteration: st.iteration,
        ..Default::default()
    };
    if st.kind == CodecKind::Gc {
        let lr_c = cfg.schedule.lr_at(cfg.lr_critic, st.iteration);
        for d in critic_draws {
            let fake = st.reconstruct_constant(&d.x, &d.z, cfg.temperature)?;
            let critic = st.critic.as_mut().expect("GC state has a critic");
            let l = critic_update(critic, &d.x, &fake, &d.nu, cfg, lr_c)?;
            record.critic = l.total.item();
            record.penalty = l.penalty;
        }
    }
    let ep = st.encoder.as_ref().map(|e| e.model.bind());
    let bp = st.mapper.model.bind();
    let gp = if st.train_generator {
        st.generator.model.bind()
    } else {
        st.generator.model.frozen()
    };
    let enc = rate_encode(
        st.encoder.as_ref().map(|e| (&e.model, &ep.as_ref().expect("bound with encoder")[..])),
        &Var::constant(x.clone()),
        noise,
        cfg.temperature,
        &st.mapper.model.arch().input_shape,
    )?;
    let b_out = st.mapper.model.forward(&bp, &enc.mapper_input)?;
    let g_out = st.generator.model.forward(&gp, &b_out.output)?;
    let l_d = mean_distance(&Var::constant(x.clone()), &g_out.output);
    record.distortion = l_d.item();
    let loss = match st.kind {
        CodecKind::Dplc => {
            let l_mmd = mmd_u_var(&Var::constant(z.clone()), &b_out.output, &st.kernel)?;
            record.mmd = l_mmd.item();
            l_d.add(&l_mmd.scale(cfg.lambda_mmd))
        }
        CodecKind::Cae => l_d,
        CodecKind::Gc => {
            let critic = st.critic.as_ref().expect("GC state has a critic");
            let cp = critic.model.frozen();
            let f = critic_closure(&critic.model, &cp);
            let adv = generator_adversarial_loss(&f, &g_out.output)?;
            record.adversarial = adv.item();
            l_d.add(&adv.scale(cfg.lambda_adv))
        }
    };
    let lr_e = cfg.schedule.lr_at(cfg.lr_encoder, st.iteration);
    let lr_g = cfg.schedule.lr_at(cfg.lr_generator, st.iteration);
    let b = x.rows();
    if let Some(ep) = &ep {
        let g = values(grad(&loss, ep, false));
        let e = st.encoder.as_mut().expect("bound with encoder");
        e.step(&g, lr_e, cfg)?;
        let rows = e.model.norm_rows(b);
        e.model.absorb_moments(&enc.moments, &rows);
    }
    let g = values(grad(&loss, &bp, false));
    st.mapper.step(&g, lr_e, cfg)?;
    let rows = st.mapper.model.norm_rows(b);
    st.mapper.model.absorb_moments(&b_out.moments, &rows);
    if st.train_generator {
        let g = values(grad(&loss, &gp, false));
        st.generator.step(&g, lr_g, cfg)?;
        let rows = st.generator.model.norm_rows(b);
        st.generator.model.absorb_moments(&g_out.moments, &rows);
    }
    st.iteration += 1;
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct CodecRun {
    pub state: CodecState,
    pub codec: Codec,
    pub history: Vec<LossRecord>,
}

fn run_codec_stage(
    mut st: CodecState,
    dataset: &mut DatasetHandle,
    prior: &PriorSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<CodecRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let b = cfg.batch_size;
    let per_iter = cfg.n_critic as u64 + 1;
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for t in 0..cfg.iterations {
        let good = st.clone();
        let base = t * per_iter;
        let mut critic_draws = Vec::new();
        if st.kind == CodecKind::Gc {
            for k in 0..cfg.n_critic as u64 {
                let x = dataset.next_batch(b)?.into_tensor();
                critic_draws.push(CriticDraw {
                    x,
                    z: codec_noise(&st, b, cfg.seed, base + k)?,
                    eta: Vec::new(),
                    nu: uniform_vec(cfg.seed, stream::MIXING, 2 * (base + k) + 1, b),
                });
            }
        }
        let c = base + cfg.n_critic as u64;
        let x = dataset.next_batch(b)?.into_tensor();
        let noise = codec_noise(&st, b, cfg.seed, c)?;
        let z = prior.sample_with(b, &mut rng::substream(cfg.seed, stream::PRIOR, c))?.into_tensor();
        let record = codec_step(&mut st, &x, &noise, &z, &critic_draws, cfg);
        let mut models = vec![&st.generator.model, &st.mapper.model];
        models.extend(st.encoder.iter().map(|e| &e.model));
        let failure = match &record {
            Err(e) => Some(e.to_string()),
            Ok(r) if !r.is_finite() => Some(format!("non-finite loss {r:?}")),
            Ok(_) if !params_finite(&models) => Some("non-finite parameters".into()),
            Ok(_) => None,
        };
        if let Some(detail) = failure {
            let ckpt = good.codec(cfg).to_checkpoint(&opts.config_fingerprint, t, cfg.seed);
            return Err(abort(&ckpt, opts, t, detail));
        }
        let record = record.expect("checked above");
        if opts.log_every > 0 && (t + 1) % opts.log_every == 0 {
            info!(
                "{} R={} iter {}: L_d {:.5} MMD {:.5} adv {:.5}",
                st.kind.name(),
                st.rate_bits,
                t + 1,
                record.distortion,
                record.mmd,
                record.adversarial
            );
        }
        history.push(record);
    }
    let codec = st.codec(cfg);
    Ok(CodecRun { state: st, codec, history })
}

/// Trains `E` and `B` at `rate_bits` against the frozen `generator`,
/// minimizing distortion plus `cfg.lambda_mmd` times the latent MMD.
pub fn train_codec(
    generator: &Model,
    rate_bits: usize,
    dataset: &mut DatasetHandle,
    arch: &ArchParams,
    prior: &PriorSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<CodecRun> {
    let st = CodecState::new(CodecKind::Dplc, Some(generator.clone()), arch, rate_bits, prior, cfg)?;
    run_codec_stage(st, dataset, prior, cfg, opts)
}

/// Compressive autoencoder: `G`, `B`, `E` jointly for distortion only.
pub fn train_cae(
    dataset: &mut DatasetHandle,
    rate_bits: usize,
    arch: &ArchParams,
    prior: &PriorSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<CodecRun> {
    let st = CodecState::new(CodecKind::Cae, None, arch, rate_bits, prior, cfg)?;
    run_codec_stage(st, dataset, prior, cfg, opts)
}

/// Generative compression: `G`, `B`, `E` jointly on distortion plus
/// `cfg.lambda_adv` times a gradient-penalized critic estimate.
pub fn train_gc(
    dataset: &mut DatasetHandle,
    rate_bits: usize,
    arch: &ArchParams,
    prior: &PriorSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<CodecRun> {
    let st = CodecState::new(CodecKind::Gc, None, arch, rate_bits, prior, cfg)?;
    run_codec_stage(st, dataset, prior, cfg, opts)
}
