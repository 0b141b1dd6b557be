//! A reduced lower bound sweep on coarse grids, written to a temporary
//! directory. The full sweep is `gaplab sweep`.

use gaplab::experiments::{emit_results, run, ExperimentConfig, GridSize};

fn main() -> gaplab::Result<()> {
    let mut cfg = ExperimentConfig::parse("[run]\nkind = sweep\nid = quick-sweep\n[eps]\nstart = 1e-2\nstop = 1e-4\ncount = 5\n")?;
    cfg.sphere.coarse = GridSize::new(96, 48);
    cfg.sphere.fine = GridSize::new(192, 96);
    cfg.tolerances.grid_delta = 0.02;
    let rec = run(&cfg)?;
    for c in &rec.checks {
        println!("{:4} {:<24} {:.6} (target {:.6})", if c.passed { "ok" } else { "FAIL" }, c.name, c.measured, c.target);
    }
    let dir = std::env::temp_dir().join("gaplab-quick-sweep");
    for f in emit_results(&rec, &dir)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
