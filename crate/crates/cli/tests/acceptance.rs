//! One line per acceptance criterion; run with `--nocapture` to see them.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use flowlab::density::{DensityGrid, GridSpec};
use flowlab::fields::VelocityField;
use flowlab::particles::{integrate_ode, integrate_ode_snapshots, sample_initial, Ensemble, InitialDistribution, Method};
use flowlab::stats::loglog_fit;
use flowlab::transport::{cfl_limit, step_continuity};
use serde_json::Value;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance")
}

struct Run {
    report: Value,
    wall: Duration,
}

fn run(name: &str, out: &Path) -> Run {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .arg("run")
        .arg(config_dir().join(format!("{name}.json")))
        .arg("--output-dir")
        .arg(out)
        .output()
        .unwrap();
    let wall = start.elapsed();
    assert!(
        matches!(status.status.code(), Some(0) | Some(2)),
        "{name}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    Run {
        report: serde_json::from_str(&text).unwrap(),
        wall,
    }
}

fn content(report: &Value) -> Value {
    let mut v = report.clone();
    v.as_object_mut().unwrap().remove("meta");
    v
}

fn num(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn within(wall: Duration, limit: f64) -> bool {
    wall.as_secs_f64() <= limit
}

/// Mass and sign after every step of a few transports near the stability limit, up to t = 1.
fn conservation_suite() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut negative = false;
    let cases: Vec<(VelocityField, GridSpec, Vec<f64>, f64)> = vec![
        (VelocityField::damped(1, 1.0), GridSpec::uniform(-4.0, 4.0, 6400, 1).unwrap(), vec![1.0], 0.04),
        (VelocityField::rotation2d(1.0), GridSpec::uniform(-6.0, 6.0, 120, 2).unwrap(), vec![1.0, 0.0], 0.09),
        (
            VelocityField::bump(vec![0.0, 0.0], 2.0, 1.0, vec![1.0, 0.5]).unwrap(),
            GridSpec::uniform(-4.0, 4.0, 80, 2).unwrap(),
            vec![-1.0, 0.0],
            0.09,
        ),
    ];
    for (field, spec, mean, var) in cases {
        let init = InitialDistribution::isotropic(mean, var);
        let mut d = flowlab::analysis::initial_density(&init, &spec, 0.0).unwrap();
        while d.time() < 1.0 {
            let dt = (0.9 * cfl_limit(&field, &d).unwrap()).min(1.0 - d.time() + 1e-12);
            let next: DensityGrid = step_continuity(&field, &d, dt).unwrap_or_else(|e| panic!("{} at t = {}: {e}", field.name(), d.time()));
            worst = worst.max((next.mass() - d.mass()).abs());
            negative |= next.values().iter().any(|v| *v < 0.0);
            d = next;
        }
    }

    let field = VelocityField::damped(1, 1.0);
    let e0 = Ensemble::from_points(0.0, &[vec![1.0]]).unwrap();
    let dts = [1e-2, 5e-3, 2.5e-3];
    let errs: Vec<f64> = dts
        .iter()
        .map(|dt| (integrate_ode(&field, &e0, 1.0, *dt, Method::Rk4).unwrap().particle(0)[0] - (-1f64).exp()).abs())
        .collect();
    let order = loglog_fit(&dts, &errs).unwrap().slope;

    let mut ranked = true;
    for field in [
        VelocityField::damped(1, 1.0),
        VelocityField::bump(vec![0.0], 1.5, 2.0, vec![1.0]).unwrap(),
    ] {
        let e0 = sample_initial(&InitialDistribution::isotropic(vec![0.0], 1.0), 20_000, 1, 0.0, 8).unwrap();
        let mut order0: Vec<usize> = (0..e0.len()).collect();
        order0.sort_by(|a, b| e0.positions()[*a].total_cmp(&e0.positions()[*b]));
        let tr = integrate_ode_snapshots(&field, &e0, &[0.5, 1.0, 2.0], 0.01, Method::Rk4).unwrap();
        for e in &tr.snapshots {
            ranked &= order0.windows(2).all(|w| e.positions()[w[0]] <= e.positions()[w[1]]);
        }
    }
    let pass = worst <= 1e-12 && !negative && order >= 3.8 && ranked;
    (
        pass,
        format!("max step mass change {worst:.1e}, negative cells {negative}, rk4 order {order:.3}, ranks kept {ranked}"),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let names = [
        "c1_reynolds",
        "c2_uniqueness",
        "c3_moments",
        "c4_dual",
        "c5_shift_series",
        "c6_detect",
        "c7_noise_variance",
        "c7_poly_detect",
    ];
    let runs: Vec<Run> = names.iter().map(|n| run(n, &tmp.path().join(n))).collect();
    let by = |n: &str| &runs[names.iter().position(|m| *m == n).unwrap()];
    let mut lines = Vec::new();

    let r = by("c1_reynolds");
    let rey = &r.report["results"]["reynolds"];
    lines.push(Line {
        id: 1,
        pass: r.report["pass"] == true && within(r.wall, 30.0),
        detail: format!(
            "L1 analytic {:.4} (<= 0.02), L1 pde {:.4} (<= 0.05), {:.1} s",
            num(rey, &["l1_particles_analytic"]),
            num(rey, &["l1_particles_pde"]),
            r.wall.as_secs_f64()
        ),
    });

    let r = by("c2_uniqueness");
    let u = &r.report["results"]["uniqueness"];
    lines.push(Line {
        id: 2,
        pass: r.report["pass"] == true && within(r.wall, 60.0),
        detail: format!(
            "max relative error {:.4} (<= 0.05), residual ratio {:.1} (> 10), {:.1} s",
            num(u, &["max_relative_error"]),
            num(u, &["residual_ratio"]),
            r.wall.as_secs_f64()
        ),
    });

    let r = by("c3_moments");
    let m = &r.report["results"];
    lines.push(Line {
        id: 3,
        pass: r.report["pass"] == true && within(r.wall, 120.0),
        detail: format!(
            "mean order {:.2} (>= 1.5), halving ratios {}, linear ok {}, {:.1} s",
            num(m, &["mean", "fitted_order"]),
            m["halving_ratios"],
            m["linear_ok"],
            r.wall.as_secs_f64()
        ),
    });

    let r = by("c4_dual");
    let rows = r.report["results"]["rows"].as_array().unwrap();
    lines.push(Line {
        id: 4,
        pass: r.report["pass"] == true && rows.len() == 2 && within(r.wall, 30.0),
        detail: format!(
            "rel diff j=1 {:.2e} (<= 0.02), j=2 {:.2e} (<= 0.05), {:.1} s",
            num(&rows[0], &["rel_diff"]),
            num(&rows[1], &["rel_diff"]),
            r.wall.as_secs_f64()
        ),
    });

    let r = by("c5_shift_series");
    let compute = num(&r.report, &["meta", "elapsed_seconds"]);
    lines.push(Line {
        id: 5,
        pass: r.report["pass"] == true && compute < 1.0,
        detail: format!(
            "|g - (e^-0.1 - 1)| = {:.1e} (<= 1e-10), {compute:.3} s",
            num(&r.report, &["results", "max_abs_error"])
        ),
    });

    let r = by("c6_detect");
    let v = &r.report["results"];
    lines.push(Line {
        id: 6,
        pass: r.report["pass"] == true && within(r.wall, 120.0),
        detail: format!(
            "rate {:.5} (0.01 +- 20%), sde {}, twin {}, {:.1} s",
            num(v, &["verdict", "rate"]),
            v["verdict"]["decision"],
            v["twin"]["decision"],
            r.wall.as_secs_f64()
        ),
    });

    let (a, b) = (by("c7_noise_variance"), by("c7_poly_detect"));
    let inc = &a.report["results"]["increments"][0];
    let s = &b.report["results"];
    lines.push(Line {
        id: 7,
        pass: a.report["pass"] == true && b.report["pass"] == true && within(a.wall + b.wall, 180.0),
        detail: format!(
            "Var W(0.1) {:.5} ({:+.2} se), decision {}, delta slope {:.3} +- {:.3} (not brownian), {:.1} s",
            num(inc, &["variance"]),
            num(inc, &["z"]),
            s["verdict"]["decision"],
            num(s, &["delta_scaling", "slope"]),
            num(s, &["delta_scaling", "slope_std_err"]),
            (a.wall + b.wall).as_secs_f64()
        ),
    });

    let start = Instant::now();
    let (pass, detail) = conservation_suite();
    let wall = start.elapsed();
    lines.push(Line {
        id: 8,
        pass: pass && within(wall, 60.0),
        detail: format!("{detail}, {:.1} s", wall.as_secs_f64()),
    });

    let mut same = Vec::new();
    for (n, first) in names.iter().zip(&runs) {
        let again = run(n, &tmp.path().join(format!("{n}_again")));
        same.push((n, content(&again.report) == content(&first.report)));
    }
    let differing: Vec<_> = same.iter().filter(|(_, s)| !s).map(|(n, _)| **n).collect();
    lines.push(Line {
        id: 9,
        pass: differing.is_empty(),
        detail: format!("{} configs rerun, differing reports: {differing:?}", names.len()),
    });

    for l in &lines {
        println!("criterion {}: {} - {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
