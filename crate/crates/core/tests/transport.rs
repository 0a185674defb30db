use flowlab::analysis::affine_gaussian;
use flowlab::density::{analytic_gaussian, moments, DensityGrid, GridSpec};
use flowlab::fields::VelocityField;
use flowlab::particles::Diffusion;
use flowlab::stats::loglog_fit;
use flowlab::transport::{
    cfl_limit, recover_velocity, residual, solve_continuity, solve_fokker_planck, step_continuity, TransportRun,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian(mean: f64, var: f64, spec: &GridSpec, t: f64) -> DensityGrid {
    analytic_gaussian(&[mean], &DMatrix::from_element(1, 1, var), spec, t).unwrap()
}

/// Three snapshots `t - tau, t, t + tau` solved from `Gaussian(1, 0.04)` at time 0.
fn solver_run(field: &VelocityField, cells: usize, t: f64, tau: f64) -> TransportRun {
    let spec = GridSpec::uniform(-2.0, 3.0, cells, 1).unwrap();
    solve_continuity(field, &gaussian(1.0, 0.04, &spec, 0.0), &[t - tau, t, t + tau], 0.9).unwrap()
}

#[test]
fn solver_residual_shrinks_under_refinement() {
    let field = VelocityField::damped(1, 1.0);
    let cells = [100usize, 200, 400, 800];
    let widths: Vec<f64> = cells.iter().map(|c| 5.0 / *c as f64).collect();
    let norms: Vec<f64> = cells
        .iter()
        .zip(&widths)
        .map(|(c, w)| residual(&field, &solver_run(&field, *c, 0.2, *w), 1).unwrap().norm_inf())
        .collect();
    assert!(norms.windows(2).all(|n| n[1] < n[0]), "{norms:?}");
    let order = loglog_fit(&widths, &norms).unwrap().slope;
    assert!(order >= 0.8, "order {order}, norms {norms:?}");
}

#[test]
fn exact_solution_residual_is_second_order() {
    let field = VelocityField::damped(1, 1.0);
    let sig0 = DMatrix::from_element(1, 1, 0.04);
    let cells = [100usize, 200, 400];
    let widths: Vec<f64> = cells.iter().map(|c| 5.0 / *c as f64).collect();
    let norms: Vec<f64> = cells
        .iter()
        .zip(&widths)
        .map(|(c, w)| {
            let spec = GridSpec::uniform(-2.0, 3.0, *c, 1).unwrap();
            let snaps = [0.3 - w, 0.3, 0.3 + w]
                .iter()
                .map(|t| {
                    let (m, s) = affine_gaussian(&field, &[1.0], &sig0, *t).unwrap();
                    analytic_gaussian(&m, &s, &spec, *t).unwrap()
                })
                .collect();
            let run = TransportRun::from_snapshots(snaps, field.clone()).unwrap();
            residual(&field, &run, 1).unwrap().norm_inf()
        })
        .collect();
    let order = loglog_fit(&widths, &norms).unwrap().slope;
    assert!(order >= 1.8, "order {order}, norms {norms:?}");
}

fn fp_run(sigma: f64) -> TransportRun {
    let spec = GridSpec::uniform(-3.0, 4.0, 700, 1).unwrap();
    let d0 = gaussian(1.0, 0.04, &spec, 0.0);
    solve_fokker_planck(&VelocityField::damped(1, 1.0), &Diffusion::Scalar(sigma), &d0, &[0.19, 0.2, 0.21], 0.9).unwrap()
}

#[test]
fn fokker_planck_residual_is_bounded_below_by_diffusion() {
    let field = VelocityField::damped(1, 1.0);
    let run = fp_run(0.3);
    let r = residual(&field, &run, 1).unwrap().norm_inf();
    let rho = run.snapshots[1].values();
    let w = run.spec().axes[0].width();
    let peak = (1..rho.len() - 1).max_by(|a, b| rho[*a].total_cmp(&rho[*b])).unwrap();
    let curvature = (rho[peak + 1] - 2.0 * rho[peak] + rho[peak - 1]) / (w * w);
    let diffusion = 0.5 * 0.09 * curvature.abs();
    assert!(r >= 0.5 * diffusion, "residual {r} vs diffusion term {diffusion}");
}

#[test]
fn fokker_planck_residual_grows_with_sigma() {
    let field = VelocityField::damped(1, 1.0);
    let norms: Vec<f64> = [0.1, 0.2, 0.4].iter().map(|s| residual(&field, &fp_run(*s), 1).unwrap().norm_inf()).collect();
    assert!(norms.windows(2).all(|n| n[1] > n[0]), "{norms:?}");
}

#[test]
fn fokker_planck_ornstein_uhlenbeck_variance() {
    let spec = GridSpec::uniform(-4.0, 4.0, 400, 1).unwrap();
    let d0 = gaussian(1.0, 0.04, &spec, 0.0);
    let run = solve_fokker_planck(
        &VelocityField::damped(1, 1.0),
        &Diffusion::Scalar(2f64.sqrt() * 0.5),
        &d0,
        &[6.0],
        0.9,
    )
    .unwrap();
    let v = moments(&run.snapshots[0]).unwrap().cov[(0, 0)];
    assert!((v - 0.25).abs() <= 0.05 * 0.25, "{v}");
}

#[test]
fn recovery_improves_under_refinement() {
    let field = VelocityField::damped(1, 1.0);
    let errs: Vec<f64> = [800usize, 1600]
        .iter()
        .map(|c| {
            let w = 5.0 / *c as f64;
            let rec = recover_velocity(&solver_run(&field, *c, 0.3, w), Some(1), None).unwrap();
            rec.max_relative_error(&field).unwrap()
        })
        .collect();
    assert!(errs[1] <= 0.05, "{errs:?}");
    assert!(errs[0] / errs[1] >= 1.5, "{errs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upwind_step_conserves_mass_and_sign(
        inner in prop::collection::vec(0.0f64..1.0, 12 * 12),
        which in 0usize..3,
        cfl in 0.05f64..1.0,
    ) {
        let spec = GridSpec::uniform(-2.0, 2.0, 20, 2).unwrap();
        let mut values = vec![0.0; spec.len()];
        for (k, v) in inner.iter().enumerate() {
            values[(4 + k / 12) * 20 + 4 + k % 12] = *v;
        }
        prop_assume!(values.iter().any(|v| *v > 0.0));
        let d = DensityGrid::from_values(spec, values, 0.0).unwrap().normalized().unwrap();
        let field = match which {
            0 => VelocityField::damped(2, 1.0),
            1 => VelocityField::rotation2d(2.0),
            _ => VelocityField::bump(vec![0.0, 0.0], 1.5, 1.0, vec![1.0, 0.5]).unwrap(),
        };
        let dt = cfl * cfl_limit(&field, &d).unwrap();
        let out = step_continuity(&field, &d, dt).unwrap();
        prop_assert!((out.mass() - d.mass()).abs() <= 1e-12);
        prop_assert!(out.values().iter().all(|v| *v >= 0.0));
    }
}
