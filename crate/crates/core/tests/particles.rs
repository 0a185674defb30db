use flowlab::density::moments_ensemble;
use flowlab::fields::VelocityField;
use flowlab::noise::{NoiseKind, NoiseSpec};
use flowlab::particles::{
    integrate_ode, integrate_ode_snapshots, integrate_sde, sample_initial, Diffusion, Ensemble, InitialDistribution,
    Method, NoiseSource, SdeSpec,
};
use flowlab::stats::loglog_fit;
use proptest::prelude::*;

fn brownian(drift: VelocityField, sigma: f64, seed: u64) -> SdeSpec {
    let dim = drift.dim();
    SdeSpec {
        drift,
        diffusion: Diffusion::Scalar(sigma),
        noise: NoiseSource::Spec(NoiseSpec::new(NoiseKind::Brownian, dim, seed).unwrap()),
    }
}

#[test]
fn rk4_is_fourth_order() {
    let field = VelocityField::damped(1, 1.0);
    let e0 = Ensemble::from_points(0.0, &[vec![1.0], vec![-2.0]]).unwrap();
    let dts = [1e-2, 5e-3, 2.5e-3];
    let errs: Vec<f64> = dts
        .iter()
        .map(|dt| {
            let e = integrate_ode(&field, &e0, 1.0, *dt, Method::Rk4).unwrap();
            (e.particle(0)[0] - (-1f64).exp()).abs()
        })
        .collect();
    let order = loglog_fit(&dts, &errs).unwrap().slope;
    assert!(order >= 3.8, "order {order}, errors {errs:?}");
}

#[test]
fn euler_is_first_order() {
    let field = VelocityField::damped(1, 1.0);
    let e0 = Ensemble::from_points(0.0, &[vec![1.0]]).unwrap();
    let dts = [1e-2, 5e-3, 2.5e-3];
    let errs: Vec<f64> = dts
        .iter()
        .map(|dt| (integrate_ode(&field, &e0, 1.0, *dt, Method::Euler).unwrap().particle(0)[0] - (-1f64).exp()).abs())
        .collect();
    let order = loglog_fit(&dts, &errs).unwrap().slope;
    assert!((order - 1.0).abs() < 0.1, "order {order}");
}

#[test]
fn pure_brownian_variance_is_elapsed_time() {
    let e0 = Ensemble::new(0.0, 1, vec![0.0; 100_000]).unwrap();
    let e = integrate_sde(&brownian(VelocityField::constant(vec![0.0]), 1.0, 5), &e0, 1.0, 0.01).unwrap();
    let v = moments_ensemble(&e).cov[(0, 0)];
    assert!((v - 1.0).abs() <= 0.02, "{v}");
}

#[test]
fn ornstein_uhlenbeck_reaches_stationary_variance() {
    let s0: f64 = 0.5;
    let e0 = Ensemble::new(0.0, 1, vec![0.0; 50_000]).unwrap();
    let spec = brownian(VelocityField::damped(1, 1.0), 2f64.sqrt() * s0, 6);
    let e = integrate_sde(&spec, &e0, 10.0, 0.005).unwrap();
    let v = moments_ensemble(&e).cov[(0, 0)];
    assert!((v - s0 * s0).abs() <= 0.05 * s0 * s0, "{v}");
}

#[test]
fn sampler_moments() {
    let n = 100_000;
    let g = sample_initial(&InitialDistribution::isotropic(vec![0.0, 0.0], 1.0), n, 2, 0.0, 1).unwrap();
    for m in moments_ensemble(&g).mean {
        assert!(m.abs() <= 4.0 / (n as f64).sqrt());
    }
    let u = InitialDistribution::Uniform { lower: vec![0.0], upper: vec![1.0] };
    let m = moments_ensemble(&sample_initial(&u, n, 1, 0.0, 2).unwrap()).mean[0];
    assert!((m - 0.5).abs() <= 0.005);
    let d = InitialDistribution::DeltaCloud { center: vec![1.0, 2.0], radius: 0.5 };
    let e = sample_initial(&d, 10_000, 2, 0.0, 3).unwrap();
    assert!(e.iter().all(|x| (x[0] - 1.0).hypot(x[1] - 2.0) <= 0.5));
}

#[test]
fn ensembles_do_not_depend_on_the_pool() {
    let spec = brownian(VelocityField::damped(2, 1.0), 0.3, 8);
    let e0 = sample_initial(&InitialDistribution::isotropic(vec![1.0, 0.0], 0.1), 20_000, 2, 0.0, 4).unwrap();
    let a = flowlab::par::with_threads(1, || integrate_sde(&spec, &e0, 0.5, 0.01).unwrap());
    let b = flowlab::par::with_threads(4, || integrate_sde(&spec, &e0, 0.5, 0.01).unwrap());
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_dimensional_flow_preserves_rank(mut xs in prop::collection::vec(-5.0f64..5.0, 2..200), rate in 0.1f64..3.0) {
        xs.sort_by(f64::total_cmp);
        let e0 = Ensemble::new(0.0, 1, xs).unwrap();
        let tr = integrate_ode_snapshots(&VelocityField::damped(1, rate), &e0, &[0.25, 0.5, 1.0, 2.0], 0.01, Method::Rk4).unwrap();
        for e in &tr.snapshots {
            prop_assert!(e.positions().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn zero_noise_matches_euler(seed in any::<u64>(), dt in 0.001f64..0.05) {
        let field = VelocityField::rotation2d(0.7);
        let e0 = sample_initial(&InitialDistribution::isotropic(vec![0.5, -0.5], 0.2), 64, 2, 0.0, seed).unwrap();
        let a = integrate_sde(&brownian(field.clone(), 0.0, seed), &e0, 0.7, dt).unwrap();
        let b = integrate_ode(&field, &e0, 0.7, dt, Method::Euler).unwrap();
        prop_assert_eq!(a, b);
    }
}
