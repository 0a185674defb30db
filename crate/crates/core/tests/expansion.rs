use flowlab::analysis::{
    concentration_check, dual_expansion_check, moment_expansion_check, variance_remainder_scaling, ExpansionMode,
    ExpansionOptions,
};
use flowlab::fields::{ScalarFunction, VelocityField};

const SIGMAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[test]
fn bump_concentration_is_monotone() {
    let f = ScalarFunction::Bump { center: vec![0.0], radius: 1.0, amplitude: 1.0 };
    let r = concentration_check(&f, 1.0, &[0.0], &[0.2, 0.1, 0.05], 40).unwrap();
    assert!(r.monotone_decreasing(), "{:?}", r.quantities);
    assert!(r.pass, "{r:?}");
}

#[test]
fn square_concentration_in_two_dimensions() {
    let f = ScalarFunction::SquaredDistance { center: vec![0.5, -0.5] };
    let r = concentration_check(&f, 100.0, &[0.5, -0.5], &SIGMAS, 20).unwrap();
    for (q, s) in r.quantities.iter().zip(SIGMAS) {
        assert!((q - 2.0 * s * s).abs() < 1e-12, "{q} vs {}", 2.0 * s * s);
    }
}

#[test]
fn damped_field_moment_expansion_pde() {
    let field = VelocityField::damped(1, 1.0);
    let r = moment_expansion_check(&field, &[1.0], &SIGMAS, 0.01, &ExpansionOptions::default()).unwrap();
    assert!(r.pass, "{r:?}");
    let order = r.mean.fitted_order.unwrap_or(2.0);
    assert!(order >= 1.5, "mean order {order}");
    for row in &r.rows {
        // cross term is -2 sigma^2 dt for v = -x
        let expected = -2.0 * row.sigma * row.sigma * 0.01;
        assert!((row.cross_term[0][0] - expected).abs() < 0.02 * expected.abs(), "{row:?}");
    }
    for ratio in &r.halving_ratios {
        assert!((3.4..=4.6).contains(ratio), "{ratio}");
    }
}

#[test]
fn damped_field_moment_expansion_particles() {
    let field = VelocityField::damped(1, 1.0);
    let opts = ExpansionOptions { mode: ExpansionMode::Particles, particles: 200_000, seed: 3, ..Default::default() };
    let r = moment_expansion_check(&field, &[1.0], &SIGMAS, 0.01, &opts).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn variance_remainder_is_second_order_in_dt() {
    let field = VelocityField::damped(1, 1.0);
    let opts = ExpansionOptions { mode: ExpansionMode::Particles, particles: 100_000, seed: 5, ..Default::default() };
    let r = variance_remainder_scaling(&field, &[1.0], 0.1, &[0.04, 0.02, 0.01, 0.005], 1.8, &opts).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn dual_expansion_first_and_second_order() {
    let field = VelocityField::damped(1, 1.0);
    let f = ScalarFunction::coordinate(0);
    let r = dual_expansion_check(&field, &f, &[1.0], 0.1, 0.01, 2, &ExpansionOptions::default()).unwrap();
    assert!(r.pass, "{r:?}");
    // D u = -u and D^2 u = u; the mean at the middle time is exp(-dt).
    let m = (-0.01f64).exp();
    assert!((r.rows[0].right + m).abs() < 1e-3 && (r.rows[0].left + 1.0).abs() < 0.02);
    assert!((r.rows[1].right - m).abs() < 1e-3 && (r.rows[1].left - 1.0).abs() < 0.05);
}
