//! Gradient decay away from the narrowest point of the flattened gap for
//! ball and perturbed inclusion shapes.

use gaplab::experiments::{run, ExperimentConfig, ExperimentKind, Points};

fn main() -> gaplab::Result<()> {
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::LocalGap))?;
    if let Points::LocalGap(rows) = &rec.points {
        for p in rows {
            println!("{:<10} R={:.4} eps+R^2={:.4} sup|grad u|={:.5}", p.shape.name(), p.radius, p.weight, p.sup_gradient);
        }
    }
    for f in &rec.fits {
        println!("{}: slope {:.4} (bound from theory {:.4})", f.name, f.slope, f.target.unwrap_or(f64::NAN));
    }
    Ok(())
}
