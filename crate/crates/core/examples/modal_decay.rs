//! Checks |V_k(r)| <= r^alpha_k |V_k(1)| for the first few spherical
//! harmonic modes.

use gaplab::ode::{default_a_cut, modal_decay_check, ModalOperatorParams, DEFAULT_PER_OCTAVE};
use gaplab::rates::Dimension;

fn main() -> gaplab::Result<()> {
    let eps = 1e-3;
    for n in [3, 4] {
        for k in 1..=5 {
            let p = ModalOperatorParams::new(Dimension::new(n)?, eps, k)?;
            let r = modal_decay_check(&p, default_a_cut(eps), DEFAULT_PER_OCTAVE, 1.0)?;
            println!(
                "n={n} k={k}: alpha_k={:.4} max |V|/r^alpha_k={:.8} slope near 1={:.4} {}",
                r.alpha_k,
                r.max_ratio,
                r.slope_near_one,
                if r.holds { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(())
}
