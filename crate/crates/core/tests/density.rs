use flowlab::density::{
    analytic_gaussian, histogram, kde, l1_distance, moments, moments_ensemble, normal_interval, Bandwidth, DensityGrid,
    GridSpec, OutOfGrid,
};
use flowlab::particles::{sample_initial, Ensemble, InitialDistribution};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn normalized(d: &DensityGrid) -> bool {
    (d.mass() - 1.0).abs() <= 1e-12
}

#[test]
fn histogram_of_standard_gaussian() {
    let e = sample_initial(&InitialDistribution::isotropic(vec![0.0], 1.0), 100_000, 1, 0.0, 1).unwrap();
    let spec = GridSpec::uniform(-6.0, 6.0, 120, 1).unwrap();
    let h = histogram(&e, &spec, OutOfGrid::Drop).unwrap();
    let exact = analytic_gaussian(&[0.0], &DMatrix::identity(1, 1), &spec, 0.0).unwrap();
    assert!(normalized(&h) && normalized(&exact));
    assert!(l1_distance(&h, &exact).unwrap() <= 0.02);
}

#[test]
fn histogram_of_uniform_is_flat() {
    let u = InitialDistribution::Uniform { lower: vec![0.0], upper: vec![1.0] };
    let e = sample_initial(&u, 100_000, 1, 0.0, 2).unwrap();
    let h = histogram(&e, &GridSpec::uniform(0.0, 1.0, 10, 1).unwrap(), OutOfGrid::Drop).unwrap();
    assert!(h.values().iter().all(|v| (v - 1.0).abs() <= 0.05));
}

#[test]
fn kde_with_default_rule() {
    let e = sample_initial(&InitialDistribution::isotropic(vec![0.0], 1.0), 100_000, 1, 0.0, 3).unwrap();
    let spec = GridSpec::uniform(-6.0, 6.0, 120, 1).unwrap();
    let k = kde(&e, &spec, &Bandwidth::Rule).unwrap();
    let exact = analytic_gaussian(&[0.0], &DMatrix::identity(1, 1), &spec, 0.0).unwrap();
    assert!(normalized(&k));
    assert!(l1_distance(&k, &exact).unwrap() <= 0.02);
}

#[test]
fn discretized_gaussian_moments() {
    let spec = GridSpec::uniform(-1.0, 3.0, 4000, 1).unwrap();
    let d = analytic_gaussian(&[1.0], &DMatrix::from_element(1, 1, 0.04), &spec, 0.0).unwrap();
    let m = moments(&d).unwrap();
    assert!((m.mean[0] - 1.0).abs() <= 1e-3);
    assert!((m.cov[(0, 0)] - 0.04).abs() <= 1e-3);
}

#[test]
fn single_cell_density_has_tiny_covariance() {
    let spec = GridSpec::uniform(-1.0, 1.0, 20, 2).unwrap();
    let mut values = vec![0.0; spec.len()];
    values[57] = 1.0 / spec.cell_volume();
    let m = moments(&DensityGrid::from_values(spec.clone(), values, 0.0).unwrap()).unwrap();
    for k in 0..2 {
        let w = spec.axes[k].width();
        assert!(m.cov[(k, k)].abs() <= w * w / 12.0);
    }
}

#[test]
fn shifted_gaussians_total_variation() {
    let spec = GridSpec::uniform(-8.0, 8.0, 16_000, 1).unwrap();
    let one = DMatrix::identity(1, 1);
    let a = analytic_gaussian(&[0.0], &one, &spec, 0.0).unwrap();
    let b = analytic_gaussian(&[0.1], &one, &spec, 0.0).unwrap();
    // The densities cross at 0.05, so the L1 gap is 2 P(|Z| < 0.05).
    let exact = 2.0 * normal_interval(-0.05, 0.05);
    assert!((exact - 0.0797).abs() < 1e-4);
    assert!((l1_distance(&a, &b).unwrap() - exact).abs() <= 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constructors_normalize(
        xs in prop::collection::vec(-2.9f64..2.9, 1..300),
        cells in 4usize..60,
        h in 0.05f64..0.5,
    ) {
        let spec = GridSpec::uniform(-3.0, 3.0, cells, 1).unwrap();
        let e = Ensemble::new(0.0, 1, xs).unwrap();
        prop_assert!(normalized(&histogram(&e, &spec, OutOfGrid::Drop).unwrap()));
        prop_assert!(normalized(&kde(&e, &spec, &Bandwidth::Scalar(h)).unwrap()));
        prop_assert!(normalized(&DensityGrid::from_fn(spec.clone(), 0.0, |x| 1.0 + x[0] * x[0]).unwrap()));
        prop_assert!(normalized(&analytic_gaussian(&[0.2], &DMatrix::from_element(1, 1, h), &spec, 0.0).unwrap()));
        let coarse = histogram(&e, &GridSpec::uniform(-3.0, 3.0, 2 * cells, 1).unwrap(), OutOfGrid::Drop)
            .unwrap()
            .coarsen(2)
            .unwrap();
        prop_assert!(normalized(&coarse));
    }

    #[test]
    fn histogram_mean_within_half_a_cell(
        pts in prop::collection::vec((-1.9f64..1.9, -1.9f64..1.9), 1..200),
        cells in 2usize..40,
    ) {
        let points: Vec<Vec<f64>> = pts.iter().map(|(a, b)| vec![*a, *b]).collect();
        let e = Ensemble::from_points(0.0, &points).unwrap();
        let spec = GridSpec::uniform(-2.0, 2.0, cells, 2).unwrap();
        let m_grid = moments(&histogram(&e, &spec, OutOfGrid::Drop).unwrap()).unwrap();
        let m_ens = moments_ensemble(&e);
        for k in 0..2 {
            prop_assert!((m_grid.mean[k] - m_ens.mean[k]).abs() <= spec.axes[k].width() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn kde_preserves_interior_mean(xs in prop::collection::vec(-1.0f64..1.0, 1..50), h in 0.05f64..0.3) {
        // Grid aligned so every particle sits on a cell centre: the discrete kernel is then symmetric.
        let w = 0.01;
        let xs: Vec<f64> = xs.iter().map(|x| (x / w).round() * w).collect();
        let e = Ensemble::new(0.0, 1, xs).unwrap();
        let spec = GridSpec::uniform(-6.0 - w / 2.0, 6.0 + w / 2.0, 1201, 1).unwrap();
        let m = moments(&kde(&e, &spec, &Bandwidth::Scalar(h)).unwrap()).unwrap();
        prop_assert!((m.mean[0] - moments_ensemble(&e).mean[0]).abs() <= 1e-10);
    }
}
