//! Solves for the bounded radial function h and certifies r < h < r^alpha
//! together with the lower envelope at the subsolution threshold.

use gaplab::ode::{default_a_cut, solve_h, verify_h_bounds, ModalOperatorParams, DEFAULT_PER_OCTAVE};
use gaplab::rates::{beta_star, Dimension};

fn main() -> gaplab::Result<()> {
    for n in [3, 4, 5] {
        let d = Dimension::new(n)?;
        for eps in [1e-2, 1e-3, 1e-4] {
            let h = solve_h(&ModalOperatorParams::new(d, eps, 1)?, default_a_cut(eps), DEFAULT_PER_OCTAVE)?;
            let c = verify_h_bounds(&h, d, eps, beta_star(d))?;
            println!(
                "n={n} eps={eps:e}: bounds {} h(sqrt eps)={:.6} envelope const={:.6} at r={:.3} a_cut spread={:.1e}",
                if c.bounds_hold { "hold" } else { "FAIL" },
                h.eval(eps.sqrt())?,
                c.envelope_constant,
                c.envelope_argmin,
                c.spread
            );
        }
    }
    Ok(())
}
