//! One test per acceptance criterion. Each prints a single
//! `PASS`/`FAIL criterion N` line to the real stdout, so the verdicts show
//! up without `--nocapture`. The two sphere sweeps run once and are shared.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use gaplab::experiments::{emit_h_profile, emit_results, run, ExperimentConfig, ExperimentKind, Points, RunRecord};
use gaplab::geometry::{
    build_bipolar_grid, build_cartesian_grid, build_gap_grid, Axis, BipolarMap, Chart, CoefficientField, Coefficients,
    CurvilinearGrid, Ends, FnCoefficients, GapMap, Grading, InclusionShape, Sym2,
};
use gaplab::ode::{default_a_cut, solve_h, verify_h_bounds, ModalOperatorParams, DEFAULT_PER_OCTAVE};
use gaplab::pde2d::{
    assemble, manufactured_convergence, solve, BoundarySpec, DiscreteProblem, EdgeCondition, EdgeKind, Manufactured,
    SolveOptions,
};
use gaplab::rates::{alpha, beta_star, beta_sufficient, subsolution_condition, Dimension};

fn verdict(criterion: u32, title: &str, passed: bool, detail: &str) {
    let line = format!("{} criterion {criterion} ({title}): {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn checks_detail(rec: &RunRecord, names: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in names {
        match rec.check(name) {
            Some(c) => {
                ok &= c.passed;
                parts.push(format!("{name}={:.6} ({})", c.measured, c.rule));
            }
            None => {
                ok = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    (ok, parts.join("; "))
}

fn sweep(n: u32) -> &'static RunRecord {
    static N3: OnceLock<RunRecord> = OnceLock::new();
    static N4: OnceLock<RunRecord> = OnceLock::new();
    let cell = if n == 3 { &N3 } else { &N4 };
    cell.get_or_init(|| {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Sweep);
        cfg.dims = vec![n];
        if n == 4 {
            cfg.tolerances.u11_slope = 0.05;
        }
        run(&cfg).expect("sweep runs")
    })
}

fn dim(n: u32) -> Dimension {
    Dimension::new(n).unwrap()
}

#[test]
fn criterion_1_exponent_table() {
    let start = Instant::now();
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::Rates)).unwrap();
    let (mut ok, mut detail) = checks_detail(&rec, &["gradient_exponent_n3", "alpha_monotone"]);
    let mut mismatches = 0;
    for n in 3..=8 {
        let d = dim(n);
        let (bs, hi) = (beta_star(d), 2.0 * beta_sufficient(d));
        for i in 0..200 {
            let b = hi * i as f64 / 199.0;
            if (b - bs).abs() > 1e-9 && subsolution_condition(d, b) != (b >= bs) {
                mismatches += 1;
            }
        }
    }
    let err3 = ((alpha(dim(3)) - 1.0) / 2.0 - (2f64.sqrt() - 2.0) / 2.0).abs();
    let secs = start.elapsed().as_secs_f64();
    ok &= mismatches == 0 && err3 <= 1e-12 && secs < 1.0;
    detail.push_str(&format!("; beta grid mismatches={mismatches}; |(alpha-1)/2 - (sqrt2-2)/2|={err3:.1e}; {secs:.2}s"));
    verdict(1, "exponent table", ok, &detail);
}

#[test]
fn criterion_2_h_certification() {
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::HCertify)).unwrap();
    let Points::HCertify(certs) = &rec.points else { panic!("h certificates expected") };
    let all_hold = certs.len() == 9 && certs.iter().all(|c| c.bounds_hold && c.monotone);
    let names = ["bounds_n3", "bounds_n4", "bounds_n5", "envelope_stability_n3", "envelope_stability_n4", "envelope_stability_n5"];
    let (ok, detail) = checks_detail(&rec, &names);
    let tol = rec.config.tolerances.envelope_spread;
    verdict(2, "h certification", ok && all_hold && tol <= 0.2, &format!("{} points, {detail}", certs.len()));
}

#[test]
fn criterion_3_modal_decay() {
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::ModeDecay)).unwrap();
    let (ok, detail) = checks_detail(&rec, &["checks_computed", "decay_bounds"]);
    verdict(3, "modal decay", ok && rec.points.len() == 20, &detail);
}

#[test]
fn criterion_4_lower_bound_rate_n3() {
    let rec = sweep(3);
    let (ok, detail) = checks_detail(rec, &["coverage_n3", "u11_slope_n3", "gradient_slope_n3", "grid_convergence_n3"]);
    let tol = rec.config.tolerances;
    let pinned = tol.u11_slope <= 0.03 && tol.gradient_slope <= 0.05 && tol.grid_delta <= 0.01;
    verdict(4, "lower bound rate, n = 3", ok && pinned, &detail);
}

#[test]
fn criterion_5_lower_bound_rate_n4() {
    let rec = sweep(4);
    let (ok, detail) = checks_detail(rec, &["coverage_n4", "u11_slope_n4", "gradient_slope_n4", "grid_convergence_n4"]);
    let target = (-3.0 + 17f64.sqrt()) / 2.0;
    let exact = (alpha(dim(4)) - target).abs() < 1e-15;
    verdict(5, "lower bound rate, n = 4", ok && exact, &detail);
}

#[test]
fn criterion_6_subsolution_invariant() {
    let (ok3, d3) = checks_detail(sweep(3), &["subsolution_n3"]);
    let (ok4, d4) = checks_detail(sweep(4), &["subsolution_n4"]);
    verdict(6, "subsolution invariant", ok3 && ok4, &format!("{d3}; {d4}"));
}

#[test]
fn criterion_7_upper_bound_consistency() {
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::LocalGap)).unwrap();
    let names = ["local_gap_unit_ball_n3_eps1e-3_slope", "local_gap_perturbed_n3_eps1e-3_slope"];
    let (ok, detail) = checks_detail(&rec, &names);
    verdict(7, "upper bound consistency", ok && rec.config.tolerances.local_gap_slope <= -0.24, &detail);
}

fn bipolar_order() -> f64 {
    let exact = Manufactured {
        value: Box::new(|x| x[0] * x[1].cos()),
        gradient: Box::new(|x| [x[1].cos(), -x[0] * x[1].sin()]),
        operator: Box::new(|x| -x[0] * x[0] * x[1].cos()),
    };
    let map = BipolarMap::new(0.1).unwrap();
    let build = move |m: usize| -> gaplab::Result<(CurvilinearGrid, Box<dyn Coefficients>)> {
        let g = CurvilinearGrid::new(
            Chart::Bipolar(map),
            Axis::new(1.0, PI, m, Grading::Uniform)?,
            Axis::new(-map.tau0, map.tau0, m, Grading::Uniform)?,
        )?;
        let c = CoefficientField::modal(&g, dim(3), 1);
        Ok((g, Box::new(c)))
    };
    let edges = [EdgeKind::Dirichlet, EdgeKind::NaturalDegenerate, EdgeKind::Neumann, EdgeKind::Neumann];
    let opts = SolveOptions { rtol: 1e-12, ..SolveOptions::default() };
    manufactured_convergence(&build, &exact, edges, &[16, 32, 64, 128], &opts).unwrap().min_order()
}

fn gap_order() -> f64 {
    let exact = Manufactured {
        value: Box::new(|x| x[0] * x[0] + x[1] * x[1]),
        gradient: Box::new(|x| [2.0 * x[0], 2.0 * x[1]]),
        operator: Box::new(|x| 6.0 * x[0]),
    };
    let map = GapMap::new(InclusionShape::quadratic_perturbed(1.0, 0.5, 0.3, 0.5).unwrap(), 0.05).unwrap();
    let build = move |m: usize| -> gaplab::Result<(CurvilinearGrid, Box<dyn Coefficients>)> {
        let (g, c) = build_gap_grid(map, dim(3), 0, m, m, Grading::geometric(Ends::Low))?;
        Ok((g, Box::new(c)))
    };
    let edges = [EdgeKind::NaturalDegenerate, EdgeKind::Dirichlet, EdgeKind::Neumann, EdgeKind::Neumann];
    let opts = SolveOptions { rtol: 1e-12, ..SolveOptions::default() };
    manufactured_convergence(&build, &exact, edges, &[16, 32, 64, 128], &opts).unwrap().min_order()
}

/// Potential between a sphere held at 1 and one held at 0; must stay in [0, 1].
fn capacitor_range() -> (f64, f64) {
    let map = BipolarMap::new(1e-2).unwrap();
    let grid = build_bipolar_grid(map, 64, 32, Grading::exponential(30.0, Ends::Low)).unwrap();
    let coef = CoefficientField::modal(&grid, dim(3), 0);
    let bcs = BoundarySpec {
        west: EdgeCondition::NaturalDegenerate,
        east: EdgeCondition::NaturalDegenerate,
        south: EdgeCondition::dirichlet_const(0.0),
        north: EdgeCondition::dirichlet_const(1.0),
    };
    let sol = solve(&DiscreteProblem::new(&grid, &coef, bcs), &SolveOptions { rtol: 1e-12, ..SolveOptions::default() }).unwrap();
    let lo = sol.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sol.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest |row sum| of a pure Neumann system and |sum of rhs| when the
/// source balances the boundary flux.
fn conservation_defect() -> f64 {
    let grid = build_cartesian_grid((0.0, 1.0), (0.0, 1.0), 12, 10, Grading::geometric(Ends::Both), Grading::Uniform).unwrap();
    let k = FnCoefficients {
        tensor: |x: [f64; 2]| Sym2 { a11: 1.0 + x[0], a12: 0.2 * x[1], a22: 2.0 },
        zeroth: |_| 0.0,
        cross: true,
    };
    let bcs = BoundarySpec {
        west: EdgeCondition::Neumann(Box::new(|_| 0.7)),
        east: EdgeCondition::Neumann(Box::new(|_| 0.3)),
        south: EdgeCondition::insulated(),
        north: EdgeCondition::insulated(),
    };
    let mut p = DiscreteProblem::new(&grid, &k, bcs);
    p.source = Some(Box::new(|_| 1.0));
    let sys = assemble(&p).unwrap();
    let rows = (0..sys.matrix.nrows()).map(|r| sys.matrix.row(r).map(|(_, v)| v).sum::<f64>().abs()).fold(0.0, f64::max);
    rows.max(sys.rhs.iter().sum::<f64>().abs())
}

fn outputs_identical() -> bool {
    let emit = |dir: &std::path::Path| {
        let rec = run(&ExperimentConfig::default_for(ExperimentKind::LocalGap)).unwrap();
        emit_results(&rec, dir.join("local_gap")).unwrap();
        let rec = run(&ExperimentConfig::default_for(ExperimentKind::HCertify)).unwrap();
        emit_results(&rec, dir.join("h")).unwrap();
        let d = dim(3);
        let sol = solve_h(&ModalOperatorParams::new(d, 1e-3, 1).unwrap(), default_a_cut(1e-3), DEFAULT_PER_OCTAVE).unwrap();
        let cert = verify_h_bounds(&sol, d, 1e-3, beta_star(d)).unwrap();
        emit_h_profile(&sol, &cert, dir.join("h")).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit(a.path());
    emit(b.path());
    let files = ["local_gap/results.csv", "local_gap/summary.json", "h/results.csv", "h/summary.json", "h/h_profile.csv"];
    files.iter().all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap())
}

#[test]
fn criterion_8_solver_quality() {
    let (ob, og) = (bipolar_order(), gap_order());
    let (lo, hi) = capacitor_range();
    let defect = conservation_defect();
    let same = outputs_identical();
    let ok = ob >= 1.9 && og >= 1.9 && lo >= -1e-12 && hi <= 1.0 + 1e-12 && defect < 1e-12 && same;
    let detail = format!(
        "order bipolar={ob:.3} gap={og:.3}; capacitor range [{lo:.3e}, {hi:.6}]; conservation defect={defect:.1e}; byte-identical={same}"
    );
    verdict(8, "solver quality", ok, &detail);
}

#[test]
fn criterion_9_consistency_triangle() {
    let (ok3, d3) = checks_detail(sweep(3), &["triangle_n3"]);
    let (ok4, d4) = checks_detail(sweep(4), &["triangle_n4"]);
    let pinned = sweep(3).config.tolerances.triangle <= 0.05;
    verdict(9, "consistency triangle", ok3 && ok4 && pinned, &format!("{d3}; {d4}"));
}
