//! One first-harmonic solve outside two unit spheres at distance eps.
//!
//! Usage: `sphere_benchmark [n] [eps] [n_sigma] [n_tau]`

use gaplab::experiments::{benchmark_sup_gradient, BENCHMARK_R0};
use gaplab::geometry::InclusionShape;
use gaplab::pde2d::{gap_average, solve_reduced_sphere_problem, SolveOptions, SphereGridSpec, SPHERE_CLUSTERING};
use gaplab::rates::Dimension;

fn main() -> gaplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let n: u32 = arg(0, "3").parse().expect("n");
    let eps: f64 = arg(1, "1e-3").parse().expect("eps");
    let ns: usize = arg(2, "256").parse().expect("n_sigma");
    let nt: usize = arg(3, "128").parse().expect("n_tau");

    let spec = SphereGridSpec::clustered(ns, nt, eps, SPHERE_CLUSTERING);
    let sol = solve_reduced_sphere_problem(Dimension::new(n)?, eps, &spec, &SolveOptions::default())?;
    let shape = InclusionShape::unit_ball(BENCHMARK_R0)?;
    println!("{} iterations, residual {:.2e}", sol.field.report.iterations, sol.field.report.relative_residual);
    println!("min (u - r) / max |u - r| = {:.3e}", sol.w_min_relative);
    for m in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let r = m * eps.sqrt();
        println!("U11({m} sqrt eps) = {:.8}", gap_average(&sol.field, r, eps, &shape)?);
    }
    let (g, at) = benchmark_sup_gradient(&sol.field, eps)?;
    println!("sup gradient near the gap = {g:.6} at (r, x_n) = ({:.3e}, {:.3e})", at[0], at[1]);
    Ok(())
}
