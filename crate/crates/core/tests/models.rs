use dplc::autodiff::{grad, Var};
use dplc::checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint};
use dplc::data::{sample_noise, sample_prior, NoiseSpec, PriorSpec};
use dplc::models::{build_model, generator_forward, mapper_forward, rate_encode, ArchParams, ArchSpec, Model, Role};
use dplc::quantization::bitrate_bpp;
use dplc::{Error, Tensor};
use proptest::prelude::*;

const ROLES: [Role; 5] = [Role::Generator, Role::WaeEncoder, Role::Critic, Role::RateEncoder, Role::Mapper];

fn mlp_params() -> ArchParams {
    ArchParams {
        code_channels: 3,
        width: 6,
        ..ArchParams::mlp(3, 2)
    }
}

fn conv_params() -> ArchParams {
    let mut p = ArchParams::dcgan(8, 4, 1);
    p.width = 2;
    p.code_channels = 1;
    p.noise_dim = 16;
    p
}

fn model(role: Role, p: &ArchParams, seed: u64) -> Model {
    build_model(role, ArchSpec::for_role(role, p).unwrap(), seed).unwrap()
}

fn input_for(m: &Model, b: usize, seed: u64) -> Tensor {
    let mut shape = vec![b];
    shape.extend(&m.arch().input_shape);
    let n: usize = shape.iter().product();
    let z = sample_prior(&PriorSpec::standard_normal(1).unwrap(), n, seed).unwrap().into_tensor();
    Tensor::new(shape, z.into_vec())
}

fn expected_output(role: Role, p: &ArchParams) -> Vec<usize> {
    match role {
        Role::Generator => p.data_shape.clone(),
        Role::WaeEncoder | Role::Mapper => vec![p.latent_dim],
        Role::Critic => vec![1],
        Role::RateEncoder => {
            let s = p.code_side().unwrap();
            if s == 1 {
                vec![p.code_channels]
            } else {
                vec![p.code_channels, s, s]
            }
        }
    }
}

#[test]
fn output_shapes_follow_the_role_contracts() {
    for p in [mlp_params(), conv_params()] {
        for role in ROLES {
            let m = model(role, &p, 1);
            let y = m.infer(&input_for(&m, 3, 2)).unwrap();
            let mut want = vec![3];
            want.extend(expected_output(role, &p));
            assert_eq!(y.shape(), &want[..], "{role} {:?}", p.family);
            assert_eq!(m.output_shape(), expected_output(role, &p));
        }
    }
}

#[test]
fn conv_rate_encoder_halves_four_times_at_64() {
    let mut p = ArchParams::dcgan(64, 8, 1);
    p.width = 1;
    p.code_channels = 2;
    let e = model(Role::RateEncoder, &p, 0);
    assert_eq!(e.output_shape(), vec![2, 4, 4]);
    assert_eq!(e.infer(&Tensor::zeros(&[1, 3, 64, 64])).unwrap().shape(), &[1, 2, 4, 4]);
}

#[test]
fn same_seed_same_parameters() {
    for role in ROLES {
        let p = mlp_params();
        assert_eq!(model(role, &p, 5).params(), model(role, &p, 5).params());
        assert_ne!(model(role, &p, 5).flat_params(), model(role, &p, 6).flat_params());
    }
}

#[test]
fn image_generator_is_bounded_deterministic_and_finite() {
    let g = model(Role::Generator, &conv_params(), 4);
    let z = input_for(&g, 4, 9).map(|v| v * 1_000.0);
    let a = g.infer(&z).unwrap();
    assert!(a.all_finite());
    assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    assert_eq!(a, g.infer(&z).unwrap());

    let g = model(Role::Generator, &mlp_params(), 4);
    let z = input_for(&g, 4, 9).map(|v| v * 1_000.0);
    assert!(g.infer(&z).unwrap().all_finite());
    assert!(generator_forward(&model(Role::Critic, &mlp_params(), 0), &g.frozen(), &Var::constant(z)).is_err());
}

#[test]
fn wrong_input_width_is_a_dimension_error() {
    let g = model(Role::Generator, &mlp_params(), 0);
    assert!(matches!(g.infer(&Tensor::zeros(&[2, 5])), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn rate_encoding_emits_binary_codes_at_the_stated_rate() {
    for p in [mlp_params(), conv_params()] {
        let e = model(Role::RateEncoder, &p, 2);
        let b = model(Role::Mapper, &p, 3);
        let x = input_for(&e, 4, 1);
        let noise = sample_noise(&NoiseSpec::new(p.noise_dim).unwrap(), 4, 0).unwrap().into_tensor();
        let params = e.frozen();
        let enc = rate_encode(Some((&e, &params)), &Var::constant(x), &noise, 1.0, &b.arch().input_shape).unwrap();
        assert!(enc.code.embedded.data().iter().all(|v| *v == 1.0 || *v == -1.0));
        let sites = p.code_sites().unwrap();
        assert_eq!(enc.code.sites, sites);
        let pixel_dims = if p.data_shape.len() == 3 { p.data_shape[1..].to_vec() } else { p.data_shape.clone() };
        let code_dims = expected_output(Role::RateEncoder, &p);
        assert_eq!(
            bitrate_bpp(&code_dims, &pixel_dims).unwrap(),
            sites as f64 / pixel_dims.iter().product::<usize>() as f64
        );
        let z = mapper_forward(&b, &b.frozen(), &enc.mapper_input).unwrap().output;
        assert_eq!(z.shape(), &[4, p.latent_dim]);
    }
}

#[test]
fn mismatched_noise_is_rejected() {
    let p = mlp_params();
    let e = model(Role::RateEncoder, &p, 2);
    let b = model(Role::Mapper, &p, 3);
    let params = e.frozen();
    let x = Var::constant(input_for(&e, 4, 1));
    let wide = Tensor::zeros(&[4, p.noise_dim + 1]);
    assert!(rate_encode(Some((&e, &params)), &x, &wide, 1.0, &b.arch().input_shape).is_err());
    let short = Tensor::zeros(&[3, p.noise_dim]);
    assert!(rate_encode(Some((&e, &params)), &x, &short, 1.0, &b.arch().input_shape).is_err());
}

#[test]
fn zero_rate_output_depends_only_on_noise() {
    let p = ArchParams { code_channels: 0, ..mlp_params() };
    let b = model(Role::Mapper, &p, 3);
    let noise = sample_noise(&NoiseSpec::new(p.noise_dim).unwrap(), 4, 0).unwrap().into_tensor();
    let run = |x: Tensor| {
        let enc = rate_encode(None, &Var::constant(x), &noise, 1.0, &b.arch().input_shape).unwrap();
        b.infer(enc.mapper_input.value()).unwrap()
    };
    assert_eq!(run(Tensor::zeros(&[4, 3])), run(Tensor::full(&[4, 3], 7.0)));
}

#[test]
fn mapper_is_stochastic_in_its_noise() {
    let p = mlp_params();
    let b = model(Role::Mapper, &p, 3);
    let code = Tensor::new(vec![1, 3], vec![1.0, -1.0, 1.0]);
    let with_noise = |seed| {
        let n = sample_noise(&NoiseSpec::new(p.noise_dim).unwrap(), 1, seed).unwrap().into_tensor();
        let mut row = code.data().to_vec();
        row.extend(n.data());
        b.infer(&Tensor::new(vec![1, 5], row)).unwrap()
    };
    assert_ne!(with_noise(0), with_noise(1));
}

fn probe_loss(m: &Model, params: &[Var], x: &Tensor, weights: &Tensor) -> Var {
    let out = m.forward_mode(params, &Var::constant(x.clone()), true).unwrap().output;
    out.reshape(&[weights.len()]).mul_const(weights).sum()
}

fn gradient_check(m: &Model, tag: &str) {
    let x = input_for(m, 3, 11);
    let out_len = 3 * m.output_shape().iter().product::<usize>();
    let weights = sample_prior(&PriorSpec::standard_normal(1).unwrap(), out_len, 12).unwrap().into_tensor().reshape(&[out_len]);
    let params = m.bind();
    let loss = probe_loss(m, &params, &x, &weights);
    let analytic: Vec<f64> = grad(&loss, &params, false).iter().flat_map(|g| g.value().data().to_vec()).collect();
    let flat = m.flat_params();
    assert_eq!(analytic.len(), flat.len());
    let h = 1e-6;
    let mut probe = m.clone();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] = flat[i] + h;
        probe.set_flat_params(&p).unwrap();
        let up = probe_loss(&probe, &probe.frozen(), &x, &weights).item();
        p[i] = flat[i] - h;
        probe.set_flat_params(&p).unwrap();
        let down = probe_loss(&probe, &probe.frozen(), &x, &weights).item();
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "{tag}: worst relative error {worst}");
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for role in ROLES {
        gradient_check(&model(role, &mlp_params(), 21), &format!("mlp {role}"));
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for role in ROLES {
        gradient_check(&model(role, &conv_params(), 22), &format!("conv {role}"));
    }
}

#[test]
fn critic_input_gradient_matches_finite_differences() {
    for p in [mlp_params(), conv_params()] {
        let c = model(Role::Critic, &p, 7);
        let x0 = input_for(&c, 2, 3);
        let x = Var::param(x0.clone());
        let s = c.forward_mode(&c.frozen(), &x, false).unwrap().output.sum();
        let g = grad(&s, std::slice::from_ref(&x), false)[0].value().clone();
        let h = 1e-6;
        for i in (0..x0.len()).step_by(7) {
            let mut up = x0.clone().into_vec();
            up[i] += h;
            let mut down = x0.clone().into_vec();
            down[i] -= h;
            let f = |v: Vec<f64>| c.infer(&Tensor::new(x0.shape().to_vec(), v)).unwrap().sum();
            let fd = (f(up) - f(down)) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-4);
            assert!(rel < 1e-4, "input {i}: {fd} vs {}", g.data()[i]);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (k, p) in [mlp_params(), conv_params()].into_iter().enumerate() {
        for role in ROLES {
            let mut m = model(role, &p, 30);
            m.set_training(false);
            let path = dir.path().join(format!("{k}-{role}.ckpt"));
            let mut ckpt = Checkpoint::single(m.clone());
            ckpt.config_fingerprint = "cfg-0123abcd".into();
            save_checkpoint(&ckpt, &path).unwrap();
            let back = load_model(&path, role).unwrap();
            let x = input_for(&m, 2, 4);
            let (a, b) = (m.infer(&x).unwrap(), back.infer(&x).unwrap());
            assert_eq!(a.zip_map(&b, |u, v| (u - v).abs()).max_abs(), 0.0);
            assert_eq!(load_checkpoint(&path).unwrap().config_fingerprint, "cfg-0123abcd");
        }
    }
}

#[test]
fn loading_the_wrong_role_fails_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("critic.ckpt");
    save_checkpoint(&Checkpoint::single(model(Role::Critic, &mlp_params(), 0)), &path).unwrap();
    assert!(matches!(load_model(&path, Role::Generator), Err(Error::RoleMismatch { .. })));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    save_checkpoint(&Checkpoint::single(model(Role::Generator, &mlp_params(), 0)), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

fn mlp_strategy() -> impl Strategy<Value = ArchParams> {
    (1usize..5, 1usize..4, 1usize..12, 1usize..5, 1usize..3, 0usize..4).prop_map(|(d, m, w, k, r, n)| ArchParams {
        code_channels: k,
        width: w,
        residual_blocks: r,
        noise_dim: n,
        ..ArchParams::mlp(d, m)
    })
}

fn conv_strategy() -> impl Strategy<Value = ArchParams> {
    (prop_oneof![Just(8usize), Just(16)], 1usize..3, 1usize..5, 1usize..3, 1usize..3, 0usize..3).prop_map(
        |(res, w, m, k, r, nc)| {
            let mut p = ArchParams::dcgan(res, m, r);
            p.width = w;
            p.code_channels = k;
            let side = p.code_side().unwrap();
            p.noise_dim = nc * side * side;
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_architectures_keep_their_contracts(p in prop_oneof![mlp_strategy(), conv_strategy()], seed in any::<u64>()) {
        for role in ROLES {
            let m = model(role, &p, seed);
            let before = m.num_params();
            let y = m.infer(&input_for(&m, 2, seed)).unwrap();
            let mut want = vec![2];
            want.extend(expected_output(role, &p));
            prop_assert_eq!(y.shape(), &want[..]);
            prop_assert!(y.all_finite());
            prop_assert_eq!(m.num_params(), before);
        }
    }
}
