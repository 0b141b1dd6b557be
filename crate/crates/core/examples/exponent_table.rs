//! Prints the blow-up exponents and subsolution thresholds for n = 3..10.

use gaplab::rates::{Dimension, RateSet};

fn main() -> gaplab::Result<()> {
    println!("{:>3} {:>10} {:>12} {:>12} {:>10} {:>10}", "n", "alpha", "U11 rate", "grad rate", "beta*", "beta_suff");
    for n in 3..=10 {
        let r = RateSet::new(Dimension::new(n)?, 3);
        println!(
            "{n:>3} {:>10.6} {:>12.6} {:>12.6} {:>10.6} {:>10.6}",
            r.alpha,
            r.potential_rate(),
            r.gradient_rate(),
            r.beta_star,
            r.beta_sufficient
        );
    }
    let r3 = RateSet::new(Dimension::new(3)?, 5);
    println!("\nn = 3 mode exponents alpha_k for k = 0..5: {:?}", r3.alpha_k);
    Ok(())
}
