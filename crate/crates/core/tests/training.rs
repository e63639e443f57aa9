use dplc::data::{make_synthetic_dataset, DatasetHandle, DatasetKind, MixtureParams, PriorSpec};
use dplc::divergences::KernelSpec;
use dplc::models::{ArchFamily, ArchParams, ArchSpec, Layer, Model, Post, Role};
use dplc::optim::{adam_update, AdamState, LrSchedule};
use dplc::rng::Rng;
use dplc::training::{
    lambda_schedule, train_cae, train_codec, train_gc, train_generator, wpp_step, CodecKind, CriticDraw, GeneratorAlgo,
    GeneratorState, RunOptions, Scale, Stage, TrainConfig,
};
use dplc::{Error, Tensor};
use rand::SeedableRng;

fn linear(role: Role, w: f64, c: f64) -> Model {
    let arch = ArchSpec {
        family: ArchFamily::Mlp,
        input_shape: vec![1],
        layers: vec![Layer::Dense { units: 1, post: Post::Identity }],
        latent_dim: 1,
        code_channels: 0,
        residual_blocks: 0,
    };
    let params = vec![Tensor::new(vec![1, 1], vec![w]), Tensor::new(vec![1], vec![c])];
    Model::from_parts(role, arch, params, Vec::new(), true).unwrap()
}

fn weight_and_bias(m: &Model) -> (f64, f64) {
    let p = m.flat_params();
    (p[0], p[1])
}

fn adam_first_step(p: f64, g: f64, lr: f64) -> f64 {
    p - lr * g / (g.abs() + 1e-8)
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    let h = 1e-6;
    (f(at + h) - f(at - h)) / (2.0 * h)
}

#[test]
fn wasserstein_pp_step_matches_hand_computed_losses_and_updates() {
    let (u, v) = (0.8, 0.05);
    let (w, c) = (0.7, -0.2);
    let (a, d) = (1.3, 0.1);
    let xs = [0.5, -1.0];
    let zs = [0.3, 0.9];
    let eta = [0.25, 0.6];
    let kc = 2.0;
    let (lambda_gp, lambda_mmd, gamma) = (10.0, 3.0, 0.3);

    let mut cfg = TrainConfig::preset(Stage::Generator(GeneratorAlgo::Wpp), Scale::Toy);
    cfg.n_critic = 1;
    cfg.lambda_gp = lambda_gp;
    cfg.lambda_mmd = lambda_mmd;
    cfg.gamma = gamma;
    cfg.schedule = LrSchedule::constant();
    let mut st = GeneratorState::from_models(
        GeneratorAlgo::Wpp,
        linear(Role::Generator, w, c),
        Some(linear(Role::WaeEncoder, a, d)),
        Some(linear(Role::Critic, u, v)),
        PriorSpec::standard_normal(1).unwrap(),
        KernelSpec::new(kc).unwrap(),
    )
    .unwrap();
    let draw = CriticDraw {
        x: Tensor::new(vec![2, 1], xs.to_vec()),
        z: Tensor::new(vec![2, 1], zs.to_vec()),
        eta: eta.to_vec(),
        nu: vec![0.4, 0.9],
    };
    let r = wpp_step(&mut st, &[draw], &cfg).unwrap();

    let zbar = |a: f64, d: f64| [a * xs[0] + d, a * xs[1] + d];
    let zb = zbar(a, d);
    let fake: Vec<f64> = (0..2).map(|i| w * (eta[i] * zs[i] + (1.0 - eta[i]) * zb[i]) + c).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let gap = mean(&fake) - mean(&xs);
    let l_f = u * gap + lambda_gp * (u.abs() - 1.0).powi(2);
    assert!((r.critic - l_f).abs() < 1e-12, "{} vs {l_f}", r.critic);
    assert!((r.penalty - lambda_gp * 0.04).abs() < 1e-12);

    let g_u = gap + 2.0 * lambda_gp * (u.abs() - 1.0);
    let u_new = adam_first_step(u, g_u, cfg.lr_critic);
    let (cu, cv) = weight_and_bias(&st.critic.as_ref().unwrap().model);
    assert!((cu - u_new).abs() < 1e-12);
    assert_eq!(cv, v, "the critic bias has zero gradient");

    let k = |p: f64, q: f64| kc / (kc + (p - q) * (p - q));
    let l_d = |w: f64, c: f64, a: f64, d: f64| {
        let zb = zbar(a, d);
        (0..2).map(|i| (xs[i] - (w * zb[i] + c)).abs()).sum::<f64>() / 2.0
    };
    let l_mmd = |a: f64, d: f64| {
        let zb = zbar(a, d);
        let cross: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| k(zs[i], zb[j])).sum();
        k(zs[0], zs[1]) + k(zb[0], zb[1]) - cross / 2.0
    };
    let l_wgan = |w: f64, c: f64| {
        let zb = zbar(a, d);
        -(0..2).map(|i| u_new * (w * zb[i] + c) + v).sum::<f64>() / 2.0
    };
    assert!((r.distortion - l_d(w, c, a, d)).abs() < 1e-12);
    assert!((r.mmd - l_mmd(a, d)).abs() < 1e-12);
    assert!((r.adversarial - l_wgan(w, c)).abs() < 1e-12);

    let theta = |w: f64, c: f64| (1.0 - gamma) * l_d(w, c, a, d) + gamma * l_wgan(w, c);
    let phi = |a: f64, d: f64| (1.0 - gamma) * (l_d(w, c, a, d) + lambda_mmd * l_mmd(a, d));
    let want_w = adam_first_step(w, central(|t| theta(t, c), w), cfg.lr_generator);
    let want_c = adam_first_step(c, central(|t| theta(w, t), c), cfg.lr_generator);
    let want_a = adam_first_step(a, central(|t| phi(t, d), a), cfg.lr_encoder);
    let want_d = adam_first_step(d, central(|t| phi(a, t), d), cfg.lr_encoder);
    let (gw, gc) = weight_and_bias(&st.generator.model);
    let (fa, fd) = weight_and_bias(&st.encoder.as_ref().unwrap().model);
    for (got, want) in [(gw, want_w), (gc, want_c), (fa, want_a), (fd, want_d)] {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert_eq!(st.iteration, 1);
}

#[test]
fn wasserstein_pp_rejects_single_sample_batches() {
    let cfg = TrainConfig::preset(Stage::Generator(GeneratorAlgo::Wpp), Scale::Toy);
    let mut st = GeneratorState::from_models(
        GeneratorAlgo::Wpp,
        linear(Role::Generator, 1.0, 0.0),
        Some(linear(Role::WaeEncoder, 1.0, 0.0)),
        Some(linear(Role::Critic, 1.0, 0.0)),
        PriorSpec::standard_normal(1).unwrap(),
        KernelSpec::new(2.0).unwrap(),
    )
    .unwrap();
    let one = CriticDraw {
        x: Tensor::new(vec![1, 1], vec![0.0]),
        z: Tensor::new(vec![1, 1], vec![0.0]),
        eta: vec![0.5],
        nu: vec![0.5],
    };
    assert!(wpp_step(&mut st, &[one], &cfg).is_err());
    assert!(wpp_step(&mut st, &[], &cfg).is_err());
}

#[test]
fn adam_recursion_matches_a_hand_trace() {
    let (lr, b1, b2) = (0.01, 0.5, 0.9);
    let mut params = vec![Tensor::new(vec![2], vec![1.0, -2.0])];
    let mut state = AdamState::new(&params);
    let grads = [[0.5, 0.0], [-1.0, 0.0], [2.0, 0.0]];
    let (mut p, mut m, mut s) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        adam_update(&mut params, &[Tensor::new(vec![2], g.to_vec())], &mut state, lr, b1, b2).unwrap();
        m = b1 * m + (1.0 - b1) * g[0];
        s = b2 * s + (1.0 - b2) * g[0] * g[0];
        let k = t as i32 + 1;
        p -= lr * (m / (1.0 - b1.powi(k))) / ((s / (1.0 - b2.powi(k))).sqrt() + 1e-8);
        assert!((params[0].data()[0] - p).abs() < 1e-15);
        assert_eq!(params[0].data()[1], -2.0, "zero gradient leaves the parameter alone");
    }
    assert_eq!(state.t, 3);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut params = vec![Tensor::zeros(&[2])];
    let mut state = AdamState::new(&params);
    assert!(adam_update(&mut params, &[Tensor::zeros(&[3])], &mut state, 1e-3, 0.9, 0.999).is_err());
    assert!(adam_update(&mut params, &[], &mut state, 1e-3, 0.9, 0.999).is_err());
}

#[test]
fn step_schedule_decays_at_milestones() {
    let s = LrSchedule::step(vec![10, 20], 0.5);
    assert_eq!(s.lr_at(1e-3, 0), 1e-3);
    assert_eq!(s.lr_at(1e-3, 9), 1e-3);
    assert_eq!(s.lr_at(1e-3, 10), 5e-4);
    assert_eq!(s.lr_at(1e-3, 20), 2.5e-4);
    assert_eq!(LrSchedule::constant().lr_at(3.0, 1_000_000), 3.0);
}

#[test]
fn lambda_schedule_scales_with_the_cae_distortion() {
    let table = [(0.0, 2.0), (1.0, 1.0), (2.0, 0.5), (8.0, 0.1)];
    assert_eq!(lambda_schedule(1.0, &table, 600.0, 1.0).unwrap(), 600.0);
    assert_eq!(lambda_schedule(0.0, &table, 600.0, 1.0).unwrap(), 1200.0);
    assert!((lambda_schedule(8.0, &table, 600.0, 1.0).unwrap() - 60.0).abs() < 1e-9);
    assert_eq!(lambda_schedule(7.0, &table, 600.0, 1.0).unwrap(), lambda_schedule(8.0, &table, 600.0, 1.0).unwrap());
    assert!(lambda_schedule(1.0, &[(1.0, 0.0)], 600.0, 1.0).is_err());
}

fn ring_data(n: usize, seed: u64) -> DatasetHandle {
    make_synthetic_dataset(DatasetKind::GaussianMixture(MixtureParams::ring(8, 2.0, 0.1)), n, seed).unwrap()
}

fn short(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::preset(stage, Scale::Toy);
    cfg.iterations = 15;
    cfg.batch_size = 32;
    cfg.schedule = LrSchedule::constant();
    cfg
}

fn small_arch() -> ArchParams {
    ArchParams {
        width: 16,
        ..ArchParams::mlp(2, 2)
    }
}

#[test]
fn every_generator_algorithm_runs_with_finite_losses() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    for algo in [GeneratorAlgo::WaeMmd, GeneratorAlgo::WganGp, GeneratorAlgo::Wpp] {
        let run = train_generator(algo, &mut ring_data(500, 1), &small_arch(), prior.clone(), &short(Stage::Generator(algo)), &RunOptions::default()).unwrap();
        assert_eq!(run.history.len(), 15);
        assert!(run.history.iter().all(|r| r.is_finite()), "{}", algo.name());
        assert_eq!(run.state.iteration, 15);
    }
}

#[test]
fn generator_training_is_reproducible() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    let cfg = short(Stage::Generator(GeneratorAlgo::Wpp));
    let go = || train_generator(GeneratorAlgo::Wpp, &mut ring_data(300, 4), &small_arch(), prior.clone(), &cfg, &RunOptions::default()).unwrap();
    let (a, b) = (go(), go());
    assert_eq!(a.state.generator.model.flat_params(), b.state.generator.model.flat_params());
    assert_eq!(a.history, b.history);
}

#[test]
fn mismatched_dataset_is_refused() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    let cfg = short(Stage::Generator(GeneratorAlgo::WaeMmd));
    let arch = ArchParams::mlp(3, 2);
    assert!(train_generator(GeneratorAlgo::WaeMmd, &mut ring_data(50, 0), &arch, prior, &cfg, &RunOptions::default()).is_err());
}

#[test]
fn divergence_aborts_and_saves_the_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last-good.ckpt");
    let prior = PriorSpec::standard_normal(2).unwrap();
    let mut cfg = short(Stage::Generator(GeneratorAlgo::WaeMmd));
    cfg.lr_generator = 1e300;
    cfg.lr_encoder = 1e300;
    let opts = RunOptions {
        abort_checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let err = train_generator(GeneratorAlgo::WaeMmd, &mut ring_data(200, 0), &small_arch(), prior, &cfg, &opts).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let saved = dplc::checkpoint::load_model(&path, Role::Generator).unwrap();
    assert!(saved.flat_params().iter().all(|v| v.is_finite()));
}

#[test]
fn codec_stage_leaves_the_generator_untouched() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    let g = train_generator(
        GeneratorAlgo::WaeMmd,
        &mut ring_data(300, 2),
        &small_arch(),
        prior.clone(),
        &short(Stage::Generator(GeneratorAlgo::WaeMmd)),
        &RunOptions::default(),
    )
    .unwrap()
    .state
    .generator
    .model;
    let before: Vec<u64> = g.flat_params().iter().map(|v| v.to_bits()).collect();
    for bits in [0, 2] {
        let run = train_codec(&g, bits, &mut ring_data(300, 3), &small_arch(), &prior, &short(Stage::Codec), &RunOptions::default()).unwrap();
        let after: Vec<u64> = run.codec.generator.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_eq!(run.codec.generator.buffers(), g.buffers());
        assert_eq!(run.codec.kind, CodecKind::Dplc);
        assert_eq!(run.codec.rate_bits, bits);
        assert!(run.history.iter().all(|r| r.is_finite()));
        let code = run.codec.encode(&ring_data(5, 9).samples().clone()).unwrap();
        assert!(code.data().iter().all(|v| *v == 1.0 || *v == -1.0));
    }
}

#[test]
fn joint_baselines_train_every_component() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    let cae = train_cae(&mut ring_data(300, 5), 2, &small_arch(), &prior, &short(Stage::Cae), &RunOptions::default()).unwrap();
    let gc = train_gc(&mut ring_data(300, 5), 2, &small_arch(), &prior, &short(Stage::Gc), &RunOptions::default()).unwrap();
    assert_eq!(cae.codec.noise_dim, 0);
    assert_eq!(gc.codec.noise_dim, 2);
    for run in [&cae, &gc] {
        assert!(run.history.iter().all(|r| r.is_finite()));
    }
    assert!(gc.history.iter().all(|r| r.critic != 0.0));

    let x = ring_data(8, 6).samples().clone();
    let code = cae.codec.encode(&x).unwrap();
    let mut r1 = Rng::seed_from_u64(0);
    let mut r2 = Rng::seed_from_u64(1);
    assert_eq!(cae.codec.decode(&code, &mut r1).unwrap(), cae.codec.decode(&code, &mut r2).unwrap(), "the CAE decoder is deterministic");
    let code = gc.codec.encode(&x).unwrap();
    let mut r1 = Rng::seed_from_u64(0);
    let mut r2 = Rng::seed_from_u64(1);
    assert_ne!(gc.codec.decode(&code, &mut r1).unwrap(), gc.codec.decode(&code, &mut r2).unwrap());
}

#[test]
fn codec_checkpoints_round_trip() {
    let prior = PriorSpec::standard_normal(2).unwrap();
    let cae = train_cae(&mut ring_data(300, 5), 2, &small_arch(), &prior, &short(Stage::Cae), &RunOptions::default()).unwrap();
    let ckpt = cae.codec.to_checkpoint("fp", 15, 7);
    let back = dplc::training::Codec::from_checkpoint(&ckpt).unwrap();
    let x = ring_data(8, 6).samples().clone();
    let mut rng = Rng::seed_from_u64(0);
    let a = cae.codec.decode(&cae.codec.encode(&x).unwrap(), &mut rng).unwrap();
    let b = back.decode(&back.encode(&x).unwrap(), &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!((back.kind, back.rate_bits, back.lambda), (cae.codec.kind, cae.codec.rate_bits, cae.codec.lambda));
}
