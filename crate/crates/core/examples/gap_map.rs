//! Flattening map of the thin gap and its coefficient matrix.

use gaplab::geometry::{GapMap, InclusionShape};

fn main() -> gaplab::Result<()> {
    let eps = 1e-3;
    for shape in [InclusionShape::unit_ball(0.5)?, InclusionShape::quadratic_perturbed(1.0, 0.5, 0.3, 0.5)?] {
        let map = GapMap::new(shape, eps)?;
        println!("{:?}", shape.kind);
        for r in [0.0, eps.sqrt(), 0.1, 0.3] {
            let (top, bottom) = shape.gap_bounds(r, eps);
            let c = map.gap_coefficients_closed_form([r, 0.5 * eps]);
            println!(
                "  r={r:.4} faces=({top:.5}, {bottom:.5}) A=[[{:.3e}, {:.3e}], [., {:.3e}]]",
                c.a11, c.a12, c.a22
            );
        }
    }
    Ok(())
}
