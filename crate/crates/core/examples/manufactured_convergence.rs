//! Observed convergence order of the finite-volume solver on a bipolar
//! chart with a manufactured solution.

use std::f64::consts::PI;

use gaplab::geometry::{Axis, BipolarMap, Chart, CoefficientField, Coefficients, CurvilinearGrid, Grading};
use gaplab::pde2d::{manufactured_convergence, EdgeKind, Manufactured, SolveOptions};
use gaplab::rates::Dimension;

fn main() -> gaplab::Result<()> {
    // u = r cos(x_n) for the n = 3, k = 1 operator div(r grad u) - u / r
    let exact = Manufactured {
        value: Box::new(|x| x[0] * x[1].cos()),
        gradient: Box::new(|x| [x[1].cos(), -x[0] * x[1].sin()]),
        operator: Box::new(|x| -x[0] * x[0] * x[1].cos()),
    };
    let map = BipolarMap::new(0.1)?;
    let build = move |m: usize| -> gaplab::Result<(CurvilinearGrid, Box<dyn Coefficients>)> {
        let g = CurvilinearGrid::new(
            Chart::Bipolar(map),
            Axis::new(1.0, PI, m, Grading::Uniform)?,
            Axis::new(-map.tau0, map.tau0, m, Grading::Uniform)?,
        )?;
        let c = CoefficientField::modal(&g, Dimension::new(3)?, 1);
        Ok((g, Box::new(c)))
    };
    let edges = [EdgeKind::Dirichlet, EdgeKind::NaturalDegenerate, EdgeKind::Neumann, EdgeKind::Neumann];
    let opts = SolveOptions { rtol: 1e-12, ..SolveOptions::default() };
    let rep = manufactured_convergence(&build, &exact, edges, &[16, 32, 64, 128], &opts)?;
    for (i, n) in rep.sizes.iter().enumerate() {
        let order = if i > 0 { format!("{:.3}", rep.orders[i - 1]) } else { "-".into() };
        println!("N={n:<4} L2 error {:.3e}  max error {:.3e}  order {order}", rep.l2_errors[i], rep.max_errors[i]);
    }
    Ok(())
}
