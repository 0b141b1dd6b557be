//! Builds the clustered bipolar grid around two spheres and reports where
//! its cells land in the meridian plane.

use gaplab::geometry::{build_bipolar_grid, BipolarImage, BipolarMap};
use gaplab::pde2d::{SphereGridSpec, SPHERE_CLUSTERING};

fn main() -> gaplab::Result<()> {
    let eps = 1e-3;
    let map = BipolarMap::new(eps)?;
    println!("tau0 = {:.6}, focal distance c = {:.6}", map.tau0, map.tau0.sinh());
    if let BipolarImage::Point { r, xn, .. } = map.forward(std::f64::consts::PI, map.tau0) {
        println!("(sigma, tau) = (pi, tau0) maps to (r, x_n) = ({r:.3e}, {xn:.6})");
    }
    let spec = SphereGridSpec::clustered(64, 32, eps, SPHERE_CLUSTERING);
    let grid = build_bipolar_grid(map, spec.n_sigma, spec.n_tau, spec.grading)?;
    let near = grid.centers.iter().filter(|c| c[0] * c[0] + c[1] * c[1] <= 4.0 * eps).count();
    println!("{} cells, {near} within r^2 + x_n^2 <= 4 eps", grid.len());
    let path = std::env::temp_dir().join("gaplab-bipolar-grid.csv");
    grid.dump_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}
