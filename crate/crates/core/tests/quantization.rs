use dplc::autodiff::{grad, Var};
use dplc::data::{sample_prior, PriorSpec};
use dplc::divergences::KernelSpec;
use dplc::evaluation::mmd_with_error;
use dplc::quantization::{
    bitrate_bpp, build_hypercube_quantizer, fit_centers, hard_quantize, hypercube_distance_bound,
    mean_quantization_distance, quantize_and_resample, soft_assignment, soft_quantize, voronoi_resample, CodeSpec,
};
use dplc::rng;
use dplc::Tensor;
use proptest::prelude::*;

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i)[j]).collect()
}

/// Kolmogorov-Smirnov statistic of `xs` against Uniform(lo, hi).
fn ks_uniform(xs: &[f64], lo: f64, hi: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

// asymptotic critical value of the KS statistic at the 1% level
const KS_CRIT_01: f64 = 1.6276;

#[test]
fn sign_corners_examples() {
    let spec = CodeSpec::sign_corners(2);
    let q = hard_quantize(&Tensor::new(vec![1, 2], vec![0.3, -0.7]), &spec).unwrap();
    assert_eq!(q.embedded.data(), &[1.0, -1.0]);
    let q = hard_quantize(&Tensor::new(vec![1, 2], vec![0.0, 2.0]), &spec).unwrap();
    assert_eq!(q.embedded.data(), &[-1.0, 1.0]);
}

#[test]
fn explicit_centers_pick_the_nearest() {
    let spec = CodeSpec::explicit(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let q = hard_quantize(&Tensor::new(vec![1, 2], vec![0.4, 0.4]), &spec).unwrap();
    assert_eq!(q.indices(&spec).unwrap(), vec![0]);
    // equidistant point goes to the lower index
    let q = hard_quantize(&Tensor::new(vec![1, 2], vec![0.5, 0.5]), &spec).unwrap();
    assert_eq!(q.indices(&spec).unwrap(), vec![0]);
}

#[test]
fn straight_through_gradient_follows_the_soft_formula() {
    let spec = CodeSpec::sign_corners(1);
    let z = Var::param(Tensor::new(vec![1, 1], vec![0.5]));
    let q = soft_quantize(&z, &spec, 1.0).unwrap();
    let s = q.surrogate.unwrap();
    assert_eq!(s.value().data(), &[1.0]);
    let g = grad(&s.sum(), std::slice::from_ref(&z), false)[0].value().item();
    // two-level softmax average over {-1, 1} at temperature 1 is tanh(2 z)
    let soft = |v: f64| (2.0 * v).tanh();
    let h = 1e-6;
    let fd = (soft(0.5 + h) - soft(0.5 - h)) / (2.0 * h);
    assert!((g - fd).abs() < 1e-5, "{g} vs {fd}");
    let value = soft_assignment(&Var::constant(Tensor::new(vec![1, 1], vec![0.5])), &spec, 1.0).unwrap();
    assert!((value.item() - soft(0.5)).abs() < 1e-12);
}

#[test]
fn low_temperature_soft_average_is_the_hard_center() {
    let spec = CodeSpec::sign_corners(1);
    let zs: Vec<f64> = (0..200).map(|i| -2.0 + 0.02 * i as f64).filter(|v: &f64| v.abs() >= 0.1).collect();
    let z = Tensor::new(vec![zs.len(), 1], zs.clone());
    let soft = soft_assignment(&Var::constant(z.clone()), &spec, 1e-3).unwrap();
    let hard = hard_quantize(&z, &spec).unwrap();
    let gap = soft.value().zip_map(&hard.embedded, |a, b| (a - b).abs()).max_abs();
    assert!(gap < 1e-6, "gap {gap}");

    let spec = CodeSpec::explicit(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let z = Tensor::new(vec![2, 2], vec![0.9, 0.2, -0.3, 0.7]);
    let soft = soft_assignment(&Var::constant(z.clone()), &spec, 1e-3).unwrap();
    let hard = hard_quantize(&z, &spec).unwrap();
    assert!(soft.value().zip_map(&hard.embedded, |a, b| (a - b).abs()).max_abs() < 1e-6);
}

#[test]
fn nonpositive_temperature_is_rejected() {
    let z = Var::constant(Tensor::new(vec![1, 1], vec![0.2]));
    assert!(soft_quantize(&z, &CodeSpec::sign_corners(1), 0.0).is_err());
    assert!(soft_quantize(&z, &CodeSpec::sign_corners(1), -1.0).is_err());
}

#[test]
fn bitrate_grid_points() {
    assert_eq!(bitrate_bpp(&[2, 4, 4], &[64, 64]).unwrap(), 0.0078125);
    assert_eq!(bitrate_bpp(&[128, 4, 4], &[64, 64]).unwrap(), 0.5);
    assert_eq!(bitrate_bpp(&[0, 4, 4], &[64, 64]).unwrap(), 0.0);
    assert!(bitrate_bpp(&[], &[64, 64]).is_err());
    assert!(bitrate_bpp(&[4], &[0, 64]).is_err());
}

#[test]
fn lloyd_fixed_points() {
    let normal = sample_prior(&PriorSpec::standard_normal(1).unwrap(), 100_000, 1).unwrap().into_tensor();
    let fit = fit_centers(&normal, 2, 0).unwrap();
    let mut c: Vec<f64> = fit.spec.centers().unwrap().into_iter().map(|c| c[0]).collect();
    c.sort_by(f64::total_cmp);
    let half_normal_mean = (2.0 / std::f64::consts::PI).sqrt();
    assert!((c[0] + half_normal_mean).abs() < 0.02 && (c[1] - half_normal_mean).abs() < 0.02, "{c:?}");

    let one = fit_centers(&normal, 1, 0).unwrap().spec.centers().unwrap();
    assert!((one[0][0] - normal.mean()).abs() < 1e-9);

    let uniform = sample_prior(&PriorSpec::uniform_hypercube(1).unwrap(), 100_000, 2).unwrap().into_tensor();
    let mut c: Vec<f64> = fit_centers(&uniform, 2, 3).unwrap().spec.centers().unwrap().into_iter().map(|c| c[0]).collect();
    c.sort_by(f64::total_cmp);
    assert!((c[0] - 0.25).abs() < 0.01 && (c[1] - 0.75).abs() < 0.01, "{c:?}");

    assert!(fit_centers(&Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]), 4, 0).is_err());
}

#[test]
fn hypercube_grid_and_mean_distance() {
    let spec = build_hypercube_quantizer(2, 2).unwrap();
    let mut centers = spec.centers().unwrap();
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(centers, vec![vec![0.25, 0.25], vec![0.25, 0.75], vec![0.75, 0.25], vec![0.75, 0.75]]);
    let z = sample_prior(&PriorSpec::uniform_hypercube(2).unwrap(), 100_000, 4).unwrap().into_tensor();
    let d = mean_quantization_distance(&z, &spec).unwrap();
    // mean distance from a uniform point in a square of edge 1/2 to its center
    assert!((d - 0.5 * 0.382_597_8).abs() < 2e-3, "{d}");
    assert!(build_hypercube_quantizer(2, 3).is_err());
}

#[test]
fn hypercube_bound_holds_for_every_sample() {
    for m in 1..=3 {
        let z = sample_prior(&PriorSpec::uniform_hypercube(m).unwrap(), 20_000, m as u64).unwrap().into_tensor();
        for k in 1..=4 {
            let r = k * m;
            let spec = build_hypercube_quantizer(m, r).unwrap();
            let q = hard_quantize(&z, &spec).unwrap();
            let bound = hypercube_distance_bound(m, r);
            for i in 0..z.rows() {
                let d: f64 = z.row(i).iter().zip(q.embedded.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d <= bound, "m={m} R={r}: {d} > {bound}");
            }
        }
    }
}

#[test]
fn voronoi_resample_of_the_positive_half_line() {
    let prior = PriorSpec::standard_normal(1).unwrap();
    let spec = CodeSpec::explicit(vec![vec![-1.0], vec![1.0]]).unwrap();
    let draws: Vec<f64> = (0..20_000).map(|s| voronoi_resample(&spec, 1, &prior, s).unwrap()[0]).collect();
    assert!(draws.iter().all(|v| *v >= 0.0));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01, "{mean}");
    assert!(voronoi_resample(&spec, 2, &prior, 0).is_err());
}

#[test]
fn voronoi_resample_in_a_hypercube_cell_is_uniform() {
    let prior = PriorSpec::uniform_hypercube(2).unwrap();
    let spec = build_hypercube_quantizer(2, 2).unwrap();
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|s| voronoi_resample(&spec, 0, &prior, s).unwrap()).collect();
    let t = Tensor::from_rows(&draws);
    for j in 0..2 {
        let d = ks_uniform(&column(&t, j), 0.0, 0.5);
        assert!(d < KS_CRIT_01 / (n as f64).sqrt(), "coordinate {j}: KS {d}");
    }
}

#[test]
fn quantize_then_resample_preserves_the_prior() {
    let cases: Vec<(PriorSpec, CodeSpec)> = vec![
        (PriorSpec::standard_normal(2).unwrap(), CodeSpec::sign_corners(2)),
        (PriorSpec::uniform_hypercube(2).unwrap(), build_hypercube_quantizer(2, 4).unwrap()),
        (
            PriorSpec::standard_normal(1).unwrap(),
            CodeSpec::explicit(vec![vec![-1.2], vec![0.0], vec![0.9]]).unwrap(),
        ),
    ];
    for (i, (prior, spec)) in cases.into_iter().enumerate() {
        let n = 10_000;
        let z = sample_prior(&prior, n, 10 + i as u64).unwrap().into_tensor();
        let mut r = rng::from_seed(20 + i as u64);
        let out = quantize_and_resample(&z, &spec, &prior, &mut r).unwrap();
        let fresh = sample_prior(&prior, n, 30 + i as u64).unwrap().into_tensor();
        let est = mmd_with_error(&out, &fresh, &KernelSpec::for_prior(&prior), 50, 0).unwrap();
        assert!(est.value.abs() <= 3.0 * est.std_err, "case {i}: {est:?}");
    }
}

fn spec_strategy() -> impl Strategy<Value = (CodeSpec, usize)> {
    prop_oneof![
        (1usize..6).prop_map(|s| (CodeSpec::sign_corners(s), s)),
        (1usize..4, 1usize..4).prop_map(|(m, k)| (build_hypercube_quantizer(m, m * k).unwrap(), m)),
        prop::collection::btree_set((-20i32..20, -20i32..20), 1..8).prop_map(|set| {
            let centers = set.into_iter().map(|(a, b)| vec![a as f64 / 4.0, b as f64 / 4.0]).collect();
            (CodeSpec::explicit(centers).unwrap(), 2)
        }),
    ]
}

fn batch(dim: usize, values: &[f64]) -> Tensor {
    let rows = values.len() / dim;
    Tensor::new(vec![rows, dim], values[..rows * dim].to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantization_is_idempotent((spec, dim) in spec_strategy(), values in prop::collection::vec(-3.0f64..3.0, 24..48)) {
        let z = batch(dim, &values);
        let q = hard_quantize(&z, &spec).unwrap();
        let again = hard_quantize(&q.embedded, &spec).unwrap();
        prop_assert_eq!(&q.symbols, &again.symbols);
        prop_assert_eq!(q.embedded.data(), again.embedded.data());
    }

    #[test]
    fn every_sample_lands_in_exactly_one_cell((spec, dim) in spec_strategy(), values in prop::collection::vec(-3.0f64..3.0, 24..48)) {
        let z = batch(dim, &values);
        let q = hard_quantize(&z, &spec).unwrap();
        prop_assert_eq!(q.symbols.len(), z.rows() * spec.sites());
        let idx = q.indices(&spec).unwrap();
        let n = spec.num_centers().unwrap();
        for (i, &j) in idx.iter().enumerate() {
            prop_assert!((j as u128) < n);
            prop_assert_eq!(spec.center(j).unwrap(), q.embedded.row(i).to_vec());
        }
    }

    #[test]
    fn straight_through_forward_is_bit_exact((spec, dim) in spec_strategy(), values in prop::collection::vec(-3.0f64..3.0, 24..48), t in 0.05f64..5.0) {
        let z = batch(dim, &values);
        let soft = soft_quantize(&Var::param(z.clone()), &spec, t).unwrap();
        let hard = hard_quantize(&z, &spec).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(soft.surrogate.unwrap().value()), bits(&hard.embedded));
    }

    #[test]
    fn lloyd_error_never_increases(seed in any::<u64>(), count in 1usize..6) {
        let z = sample_prior(&PriorSpec::standard_normal(2).unwrap(), 400, seed).unwrap().into_tensor();
        let fit = fit_centers(&z, count, seed).unwrap();
        for w in fit.error_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.error_history);
        }
        let c = fit.spec.centers().unwrap();
        for a in 0..c.len() {
            for b in a + 1..c.len() {
                prop_assert_ne!(&c[a], &c[b]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn more_centers_never_hurt(seed in any::<u64>(), r in 0usize..4) {
        let z = sample_prior(&PriorSpec::standard_normal(1).unwrap(), 2_000, seed).unwrap().into_tensor();
        let small = fit_centers(&z, 1 << r, seed).unwrap();
        let large = fit_centers(&z, 1 << (r + 1), seed).unwrap();
        let err = |f: &dplc::quantization::LloydFit| *f.error_history.last().unwrap();
        prop_assert!(err(&large) <= err(&small), "{} > {}", err(&large), err(&small));
    }
}
