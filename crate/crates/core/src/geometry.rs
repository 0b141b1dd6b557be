//! Charts, inclusion profiles and logically rectangular grids on the
//! meridian half-plane `(r, x_n)`.
//!
//! Two charts carry the physics:
//!
//! * [`GapMap`] flattens the thin region between the inclusion graphs
//!   `x_n = eps/2 + f(r)` and `x_n = -eps/2 + g(r)` onto the slab
//!   `|y_n| < eps`;
//! * [`BipolarMap`] sends the exterior of two unit discs at distance `eps`
//!   onto the rectangle `[0, pi] x [-tau0, tau0]`, with the point at
//!   infinity at the corner `(0, 0)`.
//!
//! All shapes are radially symmetric in `x'`, so a spherical-harmonic mode
//! of degree `k` reduces to a 2D problem in the meridian plane with the
//! measure weight `r^(n-2)` and a zeroth-order term `k(k+n-3) r^(n-4)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rates::Dimension;

/// Symmetric 2x2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub fn scaled(self, s: f64) -> Self {
        Self { a11: s * self.a11, a12: s * self.a12, a22: s * self.a22 }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a11 + self.a22);
        let half = 0.5 * (self.a11 - self.a22);
        let rad = (half * half + self.a12 * self.a12).sqrt();
        (mean - rad, mean + rad)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a11 > 0.0 && self.a11 * self.a22 - self.a12 * self.a12 > 0.0
    }

    pub fn is_positive_semidefinite(&self) -> bool {
        self.a11 >= 0.0 && self.a22 >= 0.0 && self.a11 * self.a22 - self.a12 * self.a12 >= -1e-14 * (self.a11 * self.a22).abs()
    }
}

/// 2x2 matrix, row major.
pub type Mat2 = [[f64; 2]; 2];

fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    /// `f(r) = 1 - sqrt(1 - r^2)`, `g = -f`.
    UnitBall,
    /// `f = (a r^2 + b r^(2+gamma)) / 2`, `g = -f`.
    QuadraticPerturbed { a: f64, gamma: f64, b: f64 },
}

/// Radial profiles of the upper and lower inclusion surfaces near the
/// origin, valid on `0 <= r < r0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionShape {
    pub kind: ShapeKind,
    pub r0: f64,
}

impl InclusionShape {
    pub fn unit_ball(r0: f64) -> Result<Self> {
        if !(r0 > 0.0 && r0 < 1.0) {
            return domain(format!("unit-ball patch radius must lie in (0, 1), got {r0}"));
        }
        Ok(Self { kind: ShapeKind::UnitBall, r0 })
    }

    pub fn quadratic_perturbed(a: f64, gamma: f64, b: f64, r0: f64) -> Result<Self> {
        if !(a > 0.0) {
            return domain(format!("curvature a must be positive, got {a}"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return domain(format!("gamma must lie in (0, 1), got {gamma}"));
        }
        if !(r0 > 0.0) {
            return domain(format!("patch radius must be positive, got {r0}"));
        }
        if a + b * r0.powf(gamma) <= 0.0 {
            return domain("profiles cross inside the patch (f - g <= 0)");
        }
        Ok(Self { kind: ShapeKind::QuadraticPerturbed { a, gamma, b }, r0 })
    }

    /// Leading curvature `a` in `f - g = a r^2 + O(r^(2+gamma))`.
    pub fn curvature(&self) -> f64 {
        match self.kind {
            ShapeKind::UnitBall => 1.0,
            ShapeKind::QuadraticPerturbed { a, .. } => a,
        }
    }

    pub fn f(&self, r: f64) -> f64 {
        match self.kind {
            // 1 - sqrt(1 - r^2) written without cancellation
            ShapeKind::UnitBall => r * r / (1.0 + (1.0 - r * r).sqrt()),
            ShapeKind::QuadraticPerturbed { a, gamma, b } => 0.5 * (a * r * r + b * r.powf(2.0 + gamma)),
        }
    }

    pub fn g(&self, r: f64) -> f64 {
        -self.f(r)
    }

    pub fn df(&self, r: f64) -> f64 {
        match self.kind {
            ShapeKind::UnitBall => r / (1.0 - r * r).sqrt(),
            ShapeKind::QuadraticPerturbed { a, gamma, b } => 0.5 * (2.0 * a * r + (2.0 + gamma) * b * r.powf(1.0 + gamma)),
        }
    }

    pub fn dg(&self, r: f64) -> f64 {
        -self.df(r)
    }

    /// Upper and lower surface heights `(eps/2 + f, -eps/2 + g)` at radius `r`.
    pub fn gap_bounds(&self, r: f64, eps: f64) -> (f64, f64) {
        (0.5 * eps + self.f(r), -0.5 * eps + self.g(r))
    }
}

/// Meridian restriction of the flattened coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCoefficients {
    /// `eps + f - g`, the tangential entry.
    pub tangential: f64,
    /// `-2 eps g' - (y_n + eps)(f' - g')`.
    pub cross: f64,
    /// `(4 eps^2 + cross^2) / (eps + f - g)`.
    pub normal: f64,
    /// Tangential entry minus its model value `eps + a rho^2`.
    pub e_rho: f64,
    /// Normal entry minus `(4 eps^2 + cross^2) / (eps + a rho^2)`.
    pub e_n: f64,
}

impl GapCoefficients {
    pub fn matrix(&self) -> Sym2 {
        Sym2 { a11: self.tangential, a12: self.cross, a22: self.normal }
    }
}

/// The fibre-wise affine change of variables flattening the gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMap {
    pub shape: InclusionShape,
    pub eps: f64,
}

impl GapMap {
    pub fn new(shape: InclusionShape, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return domain(format!("gap width must be positive, got {eps}"));
        }
        Ok(Self { shape, eps })
    }

    fn height(&self, r: f64) -> f64 {
        self.eps + self.shape.f(r) - self.shape.g(r)
    }

    /// `(r, x_n) -> (rho, y_n)`.
    pub fn forward(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        let [r, xn] = x;
        if !(r >= 0.0 && r < self.shape.r0) {
            return domain(format!("radius {r} outside [0, {})", self.shape.r0));
        }
        let (top, bottom) = self.shape.gap_bounds(r, self.eps);
        if !(xn > bottom && xn < top) {
            return domain(format!("x_n = {xn} outside the gap ({bottom}, {top}) at r = {r}"));
        }
        Ok([r, self.fibre(r, xn)])
    }

    fn fibre(&self, r: f64, xn: f64) -> f64 {
        let e = self.eps;
        2.0 * e * ((xn - self.shape.g(r) + 0.5 * e) / self.height(r) - 0.5)
    }

    /// `(rho, y_n) -> (r, x_n)`; defined on the closed slab.
    pub fn inverse(&self, y: [f64; 2]) -> [f64; 2] {
        let [rho, yn] = y;
        let e = self.eps;
        let xn = self.shape.g(rho) - 0.5 * e + (yn / (2.0 * e) + 0.5) * self.height(rho);
        [rho, xn]
    }

    /// `d(rho, y_n) / d(r, x_n)` evaluated at the flattened point `y`.
    pub fn jacobian_y_wrt_x(&self, y: [f64; 2]) -> Mat2 {
        let [rho, yn] = y;
        let e = self.eps;
        let height = self.height(rho);
        let s = &self.shape;
        let dyn_dr = (-2.0 * e * s.dg(rho) - (yn + e) * (s.df(rho) - s.dg(rho))) / height;
        [[1.0, 0.0], [dyn_dr, 2.0 * e / height]]
    }

    /// `d(r, x_n) / d(rho, y_n)`.
    pub fn jacobian_x_wrt_y(&self, y: [f64; 2]) -> Mat2 {
        let j = self.jacobian_y_wrt_x(y);
        [[1.0, 0.0], [-j[1][0] / j[1][1], 1.0 / j[1][1]]]
    }

    /// Coefficients from `2 eps (dy/dx)(dy/dx)^T / det(dy/dx)`.
    pub fn gap_coefficients(&self, y: [f64; 2]) -> Result<GapCoefficients> {
        let [rho, yn] = y;
        if !(rho >= 0.0 && rho < self.shape.r0) || yn.abs() > self.eps * (1.0 + 1e-12) {
            return domain(format!("({rho}, {yn}) outside the flattened cylinder"));
        }
        let j = self.jacobian_y_wrt_x(y);
        let m = coefficient_from_jacobian(&j, 2.0 * self.eps);
        let e = self.eps;
        let model = e + self.shape.curvature() * rho * rho;
        Ok(GapCoefficients {
            tangential: m.a11,
            cross: m.a12,
            normal: m.a22,
            e_rho: m.a11 - model,
            e_n: m.a22 - (4.0 * e * e + m.a12 * m.a12) / model,
        })
    }

    /// The same entries written out term by term.
    pub fn gap_coefficients_closed_form(&self, y: [f64; 2]) -> Sym2 {
        let [rho, yn] = y;
        let e = self.eps;
        let s = &self.shape;
        let tangential = self.height(rho);
        let cross = -2.0 * e * s.dg(rho) - (yn + e) * (s.df(rho) - s.dg(rho));
        Sym2 { a11: tangential, a12: cross, a22: (4.0 * e * e + cross * cross) / tangential }
    }
}

/// `scale * J J^T / det J` for `J = dy/dx`.
fn coefficient_from_jacobian(j: &Mat2, scale: f64) -> Sym2 {
    let det = det2(j);
    Sym2 {
        a11: scale * (j[0][0] * j[0][0] + j[0][1] * j[0][1]) / det,
        a12: scale * (j[0][0] * j[1][0] + j[0][1] * j[1][1]) / det,
        a22: scale * (j[1][0] * j[1][0] + j[1][1] * j[1][1]) / det,
    }
}

/// Image of a bipolar point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BipolarImage {
    Point { r: f64, xn: f64, scale: f64 },
    Infinity,
}

/// Bipolar chart for two unit discs centred at `(0, +-(1 + eps/2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BipolarMap {
    pub eps: f64,
    pub tau0: f64,
    /// Focal distance `sinh(tau0)`.
    pub c: f64,
}

impl BipolarMap {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return domain(format!("gap width must be positive, got {eps}"));
        }
        // acosh(1 + eps/2) without cancellation for small eps
        let tau0 = (0.5 * eps + (eps + 0.25 * eps * eps).sqrt()).ln_1p();
        Ok(Self { eps, tau0, c: tau0.sinh() })
    }

    fn denom(sigma: f64, tau: f64) -> f64 {
        // cosh(tau) - cos(sigma) = 2 sinh^2(tau/2) + 2 sin^2(sigma/2)
        let a = (0.5 * tau).sinh();
        let b = (0.5 * sigma).sin();
        2.0 * (a * a + b * b)
    }

    fn sin_sigma(sigma: f64) -> f64 {
        if sigma == 0.0 || sigma == std::f64::consts::PI {
            0.0
        } else {
            sigma.sin()
        }
    }

    pub fn forward(&self, sigma: f64, tau: f64) -> BipolarImage {
        let d = Self::denom(sigma, tau);
        if d == 0.0 {
            return BipolarImage::Infinity;
        }
        BipolarImage::Point {
            r: self.c * Self::sin_sigma(sigma) / d,
            xn: self.c * tau.sinh() / d,
            scale: self.c / d,
        }
    }

    /// `d(r, x_n) / d(sigma, tau)`.
    pub fn jacobian(&self, sigma: f64, tau: f64) -> Mat2 {
        let d = Self::denom(sigma, tau);
        let k = self.c / (d * d);
        let (s, co) = (Self::sin_sigma(sigma), sigma.cos());
        let (sh, ch) = (tau.sinh(), tau.cosh());
        [[k * (co * ch - 1.0), -k * s * sh], [-k * s * sh, k * (1.0 - co * ch)]]
    }

    /// `(r, x_n) -> (sigma, tau)` for `r >= 0`.
    pub fn inverse(&self, r: f64, xn: f64) -> (f64, f64) {
        let c = self.c;
        let sigma = (2.0 * c * r).atan2(r * r + xn * xn - c * c);
        let far = r * r + (xn + c) * (xn + c);
        let near = r * r + (xn - c) * (xn - c);
        (sigma, 0.5 * (far / near).ln())
    }

    /// Outward (into the sphere) normal derivative of `r` on `tau = +-tau0`,
    /// i.e. `-r`, and the arclength factor; returned as the flux density
    /// `r^(n-2) * d_nu(r) * scale` per unit `sigma`, negated so that it is
    /// the flux of `w = u_hat - r` leaving the domain.
    pub fn sphere_flux_density(&self, sigma: f64, n: Dimension) -> f64 {
        match self.forward(sigma, self.tau0) {
            BipolarImage::Point { r, scale, .. } => r.powi(n.get() as i32 - 1) * scale,
            BipolarImage::Infinity => 0.0,
        }
    }
}

/// Logical-to-physical chart of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Chart {
    /// `(r, x_n) = (xi1, xi2)`.
    Cartesian,
    Bipolar(BipolarMap),
    Gap(GapMap),
}

impl Chart {
    /// Physical `(r, x_n)`, or `None` at the point at infinity.
    pub fn physical(&self, xi: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Chart::Cartesian => Some(xi),
            Chart::Bipolar(m) => match m.forward(xi[0], xi[1]) {
                BipolarImage::Point { r, xn, .. } => Some([r, xn]),
                BipolarImage::Infinity => None,
            },
            Chart::Gap(m) => Some(m.inverse(xi)),
        }
    }

    /// `d(r, x_n) / d(xi1, xi2)`.
    pub fn jacobian(&self, xi: [f64; 2]) -> Mat2 {
        match self {
            Chart::Cartesian => [[1.0, 0.0], [0.0, 1.0]],
            Chart::Bipolar(m) => m.jacobian(xi[0], xi[1]),
            Chart::Gap(m) => m.jacobian_x_wrt_y(xi),
        }
    }

    pub fn logical(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        match self {
            Chart::Cartesian => Ok(x),
            Chart::Bipolar(m) => {
                let (s, t) = m.inverse(x[0], x[1]);
                Ok([s, t])
            }
            Chart::Gap(m) => m.forward(x),
        }
    }

    fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            Chart::Cartesian => ("x1", "x2"),
            Chart::Bipolar(_) => ("sigma", "tau"),
            Chart::Gap(_) => ("rho", "yn"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ends {
    Low,
    High,
    Both,
}

/// Distribution of cell sizes along one logical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grading {
    Uniform,
    /// Cells grow by `ratio` per cell away from the clustered end(s) until
    /// they reach `max_stretch` times the uniform size. The ratio refers to
    /// an axis of [`Grading::REFERENCE_CELLS`] cells; other counts use
    /// `ratio^(REFERENCE_CELLS / cells)` so that refinement samples one
    /// fixed mapping.
    Geometric { ratio: f64, ends: Ends, max_stretch: f64 },
}

impl Grading {
    pub const DEFAULT_RATIO: f64 = 1.05;
    pub const REFERENCE_CELLS: usize = 64;

    pub fn geometric(ends: Ends) -> Self {
        Self::Geometric { ratio: Self::DEFAULT_RATIO, ends, max_stretch: 2.0 }
    }

    /// Uncapped exponential clustering whose largest to smallest cell size
    /// ratio is about `contrast` (exactly so for `Ends::Low` and `Ends::High`).
    pub fn exponential(contrast: f64, ends: Ends) -> Self {
        let span = match ends {
            Ends::Both => 0.5 * Self::REFERENCE_CELLS as f64,
            _ => Self::REFERENCE_CELLS as f64,
        };
        Self::Geometric { ratio: contrast.max(1.0).powf(1.0 / span), ends, max_stretch: f64::INFINITY }
    }

    /// `cells + 1` monotone face positions from `lo` to `hi`.
    pub fn faces(&self, lo: f64, hi: f64, cells: usize) -> Result<Vec<f64>> {
        if cells == 0 || !(hi > lo) {
            return Err(Error::InvalidGrid(format!("cannot grade {cells} cells on [{lo}, {hi}]")));
        }
        let len = hi - lo;
        let sizes: Vec<f64> = match *self {
            Grading::Uniform => vec![len / cells as f64; cells],
            Grading::Geometric { ratio, ends, max_stretch } => {
                if !(ratio >= 1.0) || !(max_stretch >= 1.0) {
                    return Err(Error::InvalidGrid(format!("bad geometric grading ratio={ratio} stretch={max_stretch}")));
                }
                let cap = max_stretch * len / cells as f64;
                let ratio = ratio.powf(Self::REFERENCE_CELLS as f64 / cells as f64);
                // distance from the clustered end in cells, measured to the
                // cell midpoint so that both ends match under `Both`
                let dist: Vec<f64> = (0..cells)
                    .map(|i| {
                        let from_low = i as f64;
                        let from_high = (cells - 1 - i) as f64;
                        match ends {
                            Ends::Low => from_low,
                            Ends::High => from_high,
                            Ends::Both => from_low.min(from_high),
                        }
                    })
                    .collect();
                let total = |d0: f64| -> f64 { dist.iter().map(|&k| (d0 * ratio.powf(k)).min(cap)).sum() };
                let (mut a, mut b) = (0.0, cap.min(len));
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if total(mid) < len {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                let d0 = 0.5 * (a + b);
                let raw: Vec<f64> = dist.iter().map(|&k| (d0 * ratio.powf(k)).min(cap)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v * len / s).collect()
            }
        };
        let mut faces = Vec::with_capacity(cells + 1);
        let mut acc = lo;
        faces.push(lo);
        for s in &sizes[..cells - 1] {
            acc += s;
            faces.push(acc);
        }
        faces.push(hi);
        Ok(faces)
    }
}

/// One logical axis: face positions and cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub faces: Vec<f64>,
    pub centers: Vec<f64>,
    pub grading: Grading,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, cells: usize, grading: Grading) -> Result<Self> {
        let faces = grading.faces(lo, hi, cells)?;
        let centers = faces.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { faces, centers, grading })
    }

    pub fn cells(&self) -> usize {
        self.centers.len()
    }

    pub fn lo(&self) -> f64 {
        self.faces[0]
    }

    pub fn hi(&self) -> f64 {
        *self.faces.last().expect("non-empty axis")
    }

    pub fn width(&self, i: usize) -> f64 {
        self.faces[i + 1] - self.faces[i]
    }
}

/// Logically rectangular grid, cell-centred, with its chart.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvilinearGrid {
    pub chart: Chart,
    pub xi1: Axis,
    pub xi2: Axis,
    /// Physical `(r, x_n)` at cell centres, `j`-fastest ordering.
    pub centers: Vec<[f64; 2]>,
    /// Physical meridian area of each cell.
    pub volumes: Vec<f64>,
}

const GAUSS2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

impl CurvilinearGrid {
    pub fn new(chart: Chart, xi1: Axis, xi2: Axis) -> Result<Self> {
        let (n1, n2) = (xi1.cells(), xi2.cells());
        let mut centers = Vec::with_capacity(n1 * n2);
        let mut volumes = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            for j in 0..n2 {
                let c = [xi1.centers[i], xi2.centers[j]];
                let x = chart
                    .physical(c)
                    .ok_or_else(|| Error::InvalidGrid(format!("cell ({i}, {j}) centre maps to infinity")))?;
                let (h1, h2) = (0.5 * xi1.width(i), 0.5 * xi2.width(j));
                let mut vol = 0.0;
                for g1 in GAUSS2 {
                    for g2 in GAUSS2 {
                        vol += det2(&chart.jacobian([c[0] + g1 * h1, c[1] + g2 * h2])).abs();
                    }
                }
                vol *= h1 * h2;
                if !(vol > 0.0) || !vol.is_finite() {
                    return Err(Error::InvalidGrid(format!("cell ({i}, {j}) has volume {vol}")));
                }
                centers.push(x);
                volumes.push(vol);
            }
        }
        Ok(Self { chart, xi1, xi2, centers, volumes })
    }

    pub fn n1(&self) -> usize {
        self.xi1.cells()
    }

    pub fn n2(&self) -> usize {
        self.xi2.cells()
    }

    pub fn len(&self) -> usize {
        self.n1() * self.n2()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n2() + j
    }

    pub fn logical_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.xi1.centers[i], self.xi2.centers[j]]
    }

    /// CSV node dump: `i,j,<xi1>,<xi2>,r,xn,cell_volume`.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (a, b) = self.chart.axis_names();
        writeln!(out, "i,j,{a},{b},r,xn,cell_volume")?;
        for i in 0..self.n1() {
            for j in 0..self.n2() {
                let k = self.index(i, j);
                let [r, xn] = self.centers[k];
                writeln!(
                    out,
                    "{i},{j},{},{},{},{},{}",
                    fmt12(self.xi1.centers[i]),
                    fmt12(self.xi2.centers[j]),
                    fmt12(r),
                    fmt12(xn),
                    fmt12(self.volumes[k])
                )?;
            }
        }
        Ok(())
    }
}

/// Fixed 12-significant-digit float formatting used by every text output.
pub fn fmt12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{:.11e}", x);
    // canonical round trip drops trailing zeros
    let v: f64 = s.parse().expect("formatted float parses");
    format!("{v:?}")
}

/// Bipolar grid on `[0, pi] x [-tau0, tau0]`.
pub fn build_bipolar_grid(map: BipolarMap, n_sigma: usize, n_tau: usize, grading: Grading) -> Result<CurvilinearGrid> {
    if n_sigma < 8 || n_tau < 8 {
        return Err(Error::InvalidGrid(format!("bipolar grid needs at least 8x8 cells, got {n_sigma}x{n_tau}")));
    }
    let xi1 = Axis::new(0.0, std::f64::consts::PI, n_sigma, grading)?;
    let xi2 = Axis::new(-map.tau0, map.tau0, n_tau, Grading::Uniform)?;
    CurvilinearGrid::new(Chart::Bipolar(map), xi1, xi2)
}

/// Flattened gap grid on `[0, r0] x [-eps, eps]` with its modal coefficients.
pub fn build_gap_grid(
    map: GapMap,
    n: Dimension,
    k: u32,
    n_rho: usize,
    n_normal: usize,
    grading: Grading,
) -> Result<(CurvilinearGrid, CoefficientField)> {
    if n_rho < 8 || n_normal < 8 {
        return Err(Error::InvalidGrid(format!("gap grid needs at least 8x8 cells, got {n_rho}x{n_normal}")));
    }
    let xi1 = Axis::new(0.0, map.shape.r0, n_rho, grading)?;
    let xi2 = Axis::new(-map.eps, map.eps, n_normal, Grading::Uniform)?;
    let grid = CurvilinearGrid::new(Chart::Gap(map), xi1, xi2)?;
    let coef = CoefficientField::modal(&grid, n, k);
    Ok((grid, coef))
}

pub fn build_cartesian_grid(
    x1: (f64, f64),
    x2: (f64, f64),
    n1: usize,
    n2: usize,
    grading1: Grading,
    grading2: Grading,
) -> Result<CurvilinearGrid> {
    let a1 = Axis::new(x1.0, x1.1, n1, grading1)?;
    let a2 = Axis::new(x2.0, x2.1, n2, grading2)?;
    CurvilinearGrid::new(Chart::Cartesian, a1, a2)
}

/// Logical-space flux tensor and zeroth-order coefficient of
/// `div(K grad u) - q u`.
pub trait Coefficients: Send + Sync {
    fn tensor(&self, xi: [f64; 2]) -> Sym2;
    fn zeroth(&self, xi: [f64; 2]) -> f64;
    /// Whether `K12` can be non-zero anywhere.
    fn has_cross(&self) -> bool;
    /// Factor turning a physical meridian source density into the logical
    /// one that goes with [`Coefficients::tensor`].
    fn logical_density(&self, _xi: [f64; 2]) -> f64 {
        1.0
    }
}

/// Coefficients of the degree-`k` meridian operator
/// `div(r^(n-2) grad u) - k(k+n-3) r^(n-4) u` pulled back through a chart.
///
/// On a gap chart the tensor is the flattened coefficient matrix scaled by
/// `2 eps` (so it reproduces the textbook entries), times `r^(n-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientField {
    pub chart: Chart,
    pub n: Dimension,
    pub k: u32,
    pub mu: f64,
}

impl CoefficientField {
    pub fn modal(grid: &CurvilinearGrid, n: Dimension, k: u32) -> Self {
        Self { chart: grid.chart, n, k, mu: n.sphere_eigenvalue(k) }
    }

    fn weight(&self, r: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            r.powi(self.n.get() as i32 - 2)
        }
    }

    /// Ratio of largest to smallest eigenvalue of the unweighted tensor over
    /// the cell centres of `grid`.
    pub fn ellipticity_ratio(&self, grid: &CurvilinearGrid) -> f64 {
        let mut worst = 1.0f64;
        for i in 0..grid.n1() {
            for j in 0..grid.n2() {
                let xi = grid.logical_center(i, j);
                let r = grid.centers[grid.index(i, j)][0];
                let (lo, hi) = self.tensor(xi).scaled(1.0 / self.weight(r)).eigenvalues();
                worst = worst.max(hi / lo);
            }
        }
        worst
    }
}

impl Coefficients for CoefficientField {
    fn tensor(&self, xi: [f64; 2]) -> Sym2 {
        let Some([r, _]) = self.chart.physical(xi) else {
            return Sym2::default();
        };
        let w = self.weight(r);
        if w == 0.0 {
            return Sym2::default();
        }
        match self.chart {
            Chart::Gap(m) => m.gap_coefficients_closed_form(xi).scaled(w),
            _ => {
                let j = self.chart.jacobian(xi);
                let det = det2(&j).abs();
                let (a, b, c, d) = (j[0][0], j[0][1], j[1][0], j[1][1]);
                Sym2 {
                    a11: w * (b * b + d * d) / det,
                    a12: -w * (a * b + c * d) / det,
                    a22: w * (a * a + c * c) / det,
                }
            }
        }
    }

    fn zeroth(&self, xi: [f64; 2]) -> f64 {
        if self.mu == 0.0 {
            return 0.0;
        }
        let Some([r, _]) = self.chart.physical(xi) else {
            return 0.0;
        };
        self.mu * r.powi(self.n.get() as i32 - 4) * self.logical_density(xi)
    }

    fn has_cross(&self) -> bool {
        matches!(self.chart, Chart::Gap(_))
    }

    fn logical_density(&self, xi: [f64; 2]) -> f64 {
        let scale = match self.chart {
            Chart::Gap(m) => 2.0 * m.eps,
            _ => 1.0,
        };
        scale * det2(&self.chart.jacobian(xi)).abs()
    }
}

/// Constant or closure-defined coefficients for tests and manufactured
/// problems.
pub struct FnCoefficients<K, Q>
where
    K: Fn([f64; 2]) -> Sym2 + Send + Sync,
    Q: Fn([f64; 2]) -> f64 + Send + Sync,
{
    pub tensor: K,
    pub zeroth: Q,
    pub cross: bool,
}

impl<K, Q> Coefficients for FnCoefficients<K, Q>
where
    K: Fn([f64; 2]) -> Sym2 + Send + Sync,
    Q: Fn([f64; 2]) -> f64 + Send + Sync,
{
    fn tensor(&self, xi: [f64; 2]) -> Sym2 {
        (self.tensor)(xi)
    }

    fn zeroth(&self, xi: [f64; 2]) -> f64 {
        (self.zeroth)(xi)
    }

    fn has_cross(&self) -> bool {
        self.cross
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ball_map(eps: f64) -> GapMap {
        GapMap::new(InclusionShape::unit_ball(0.7).unwrap(), eps).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(InclusionShape::unit_ball(1.0).is_err());
        assert!(InclusionShape::quadratic_perturbed(0.0, 0.5, 0.1, 0.5).is_err());
        assert!(InclusionShape::quadratic_perturbed(1.0, 1.5, 0.1, 0.5).is_err());
        let s = InclusionShape::quadratic_perturbed(1.0, 0.5, 0.3, 0.7).unwrap();
        assert_eq!(s.f(0.0), 0.0);
        assert_eq!(s.df(0.0), 0.0);
        let ball = InclusionShape::unit_ball(0.9).unwrap();
        assert!((ball.f(0.6) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gap_map_endpoints() {
        let m = ball_map(1e-2);
        let r = 0.3;
        let (top, bottom) = m.shape.gap_bounds(r, m.eps);
        assert!((m.fibre(r, bottom) + m.eps).abs() < 1e-15);
        assert!((m.fibre(r, top) - m.eps).abs() < 1e-15);
        assert!(m.fibre(r, 0.5 * (top + bottom)).abs() < 1e-15);
        assert!(m.forward([r, top + 1e-3]).is_err());
        assert!(m.forward([0.8, 0.0]).is_err());
    }

    #[test]
    fn gap_map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for shape in [
            InclusionShape::unit_ball(0.7).unwrap(),
            InclusionShape::quadratic_perturbed(1.0, 0.5, 0.3, 0.7).unwrap(),
        ] {
            let m = GapMap::new(shape, 1e-3).unwrap();
            for _ in 0..1000 {
                let r = rng.gen_range(0.0..0.7);
                let (top, bottom) = shape.gap_bounds(r, m.eps);
                let xn = rng.gen_range(bottom..top);
                let y = m.forward([r, xn]).unwrap();
                assert!(y[1].abs() < m.eps);
                let back = m.inverse(y);
                assert!((back[0] - r).abs() < 1e-12 && (back[1] - xn).abs() < 1e-12);
                let again = m.forward(back).unwrap();
                assert!((again[1] - y[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gap_coefficients_at_axis() {
        let m = ball_map(1e-2);
        let c = m.gap_coefficients([0.0, 0.3e-2]).unwrap();
        assert_eq!(c.cross, 0.0);
        assert_eq!(c.tangential, m.eps);
        assert!((c.normal - 4.0 * m.eps).abs() < 1e-15);
        assert!(m.gap_coefficients([0.0, 0.02]).is_err());
    }

    #[test]
    fn gap_coefficients_two_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = GapMap::new(InclusionShape::quadratic_perturbed(1.0, 0.5, 0.3, 0.7).unwrap(), 1e-2).unwrap();
        for _ in 0..200 {
            let y = [rng.gen_range(0.0..0.69), rng.gen_range(-m.eps..m.eps)];
            let exact = m.gap_coefficients(y).unwrap().matrix();
            let closed = m.gap_coefficients_closed_form(y);
            for (a, b) in [(exact.a11, closed.a11), (exact.a12, closed.a12), (exact.a22, closed.a22)] {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            // finite-difference Jacobian of the forward map at x = inverse(y)
            let x = m.inverse(y);
            let h = 1e-7;
            let fwd = |p: [f64; 2]| [p[0], m.fibre(p[0], p[1])];
            let dr = {
                let (a, b) = (fwd([x[0] + h, x[1]]), fwd([x[0] - h, x[1]]));
                [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)]
            };
            let hn = h * m.eps;
            let dn = {
                let (a, b) = (fwd([x[0], x[1] + hn]), fwd([x[0], x[1] - hn]));
                [(a[0] - b[0]) / (2.0 * hn), (a[1] - b[1]) / (2.0 * hn)]
            };
            let jfd = [[dr[0], dn[0]], [dr[1], dn[1]]];
            let fd = coefficient_from_jacobian(&jfd, 2.0 * m.eps);
            for (a, b) in [(exact.a11, fd.a11), (exact.a12, fd.a12), (exact.a22, fd.a22)] {
                assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gap_coefficients_are_spd_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ball_map(1e-3);
        let mut cross_const = 0.0f64;
        for _ in 0..1000 {
            let y = [rng.gen_range(0.0..0.69), rng.gen_range(-m.eps..m.eps)];
            let c = m.gap_coefficients(y).unwrap();
            assert!(c.matrix().is_positive_definite());
            if y[0] > 0.0 {
                cross_const = cross_const.max(c.cross.abs() / (m.eps * y[0]));
            }
        }
        // |a^{rho n}| <= 2 eps rho / sqrt(1 - rho^2) for the ball
        assert!(cross_const <= 2.0 / (1.0 - 0.69f64 * 0.69).sqrt() + 1e-9);
        assert!(cross_const > 0.5);
    }

    #[test]
    fn perturbed_e_term_bound() {
        let (a, gamma, b) = (1.0, 0.5, 0.3);
        let m = GapMap::new(InclusionShape::quadratic_perturbed(a, gamma, b, 0.7).unwrap(), 1e-3).unwrap();
        let mut c_max = 0.0f64;
        for i in 1..=100 {
            let rho = 0.69 * i as f64 / 100.0;
            let e = m.gap_coefficients([rho, 0.0]).unwrap().e_rho;
            c_max = c_max.max(e.abs() / rho.powf(2.0 + gamma));
        }
        assert!((c_max - b).abs() < 1e-9, "fitted constant {c_max}");
    }

    #[test]
    fn bipolar_circles_and_axis() {
        let m = BipolarMap::new(0.1).unwrap();
        assert!((m.tau0.cosh() - 1.05).abs() < 1e-14);
        for i in 1..200 {
            let sigma = PI * i as f64 / 200.0;
            for (tau, centre) in [(m.tau0, 1.0 + 0.05), (-m.tau0, -1.0 - 0.05)] {
                let BipolarImage::Point { r, xn, .. } = m.forward(sigma, tau) else { panic!() };
                assert!((r * r + (xn - centre).powi(2) - 1.0).abs() < 1e-12);
            }
        }
        let BipolarImage::Point { r, xn, .. } = m.forward(PI, 0.0) else { panic!() };
        assert_eq!((r, xn), (0.0, 0.0));
        let BipolarImage::Point { r, xn, .. } = m.forward(PI, m.tau0) else { panic!() };
        assert_eq!(r, 0.0);
        assert!((xn - 0.05).abs() < 1e-14);
        assert_eq!(m.forward(0.0, 0.0), BipolarImage::Infinity);
        let BipolarImage::Point { r, .. } = m.forward(0.0, 0.01) else { panic!() };
        assert_eq!(r, 0.0);
    }

    #[test]
    fn bipolar_round_trip_and_conformality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = BipolarMap::new(1e-3).unwrap();
        for _ in 0..1000 {
            let sigma = rng.gen_range(0.01..PI - 0.01);
            let tau = rng.gen_range(-m.tau0..m.tau0);
            let BipolarImage::Point { r, xn, scale } = m.forward(sigma, tau) else { panic!() };
            let (s2, t2) = m.inverse(r, xn);
            assert!((s2 - sigma).abs() < 1e-12 && (t2 - tau).abs() < 1e-12 * (1.0 + 1.0 / m.tau0));
            let j = m.jacobian(sigma, tau);
            let dot = j[0][0] * j[0][1] + j[1][0] * j[1][1];
            let l1 = (j[0][0].powi(2) + j[1][0].powi(2)).sqrt();
            let l2 = (j[0][1].powi(2) + j[1][1].powi(2)).sqrt();
            assert!(dot.abs() <= 1e-10 * l1 * l2);
            assert!((l1 - scale).abs() <= 1e-12 * scale && (l2 - scale).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn bipolar_jacobian_matches_differences() {
        let m = BipolarMap::new(0.05).unwrap();
        let pt = |s: f64, t: f64| match m.forward(s, t) {
            BipolarImage::Point { r, xn, .. } => [r, xn],
            BipolarImage::Infinity => panic!(),
        };
        let (s, t) = (1.1, 0.3 * m.tau0);
        let h = 1e-6;
        let j = m.jacobian(s, t);
        let ds = [(pt(s + h, t)[0] - pt(s - h, t)[0]) / (2.0 * h), (pt(s + h, t)[1] - pt(s - h, t)[1]) / (2.0 * h)];
        let ht = h * m.tau0;
        let dt = [(pt(s, t + ht)[0] - pt(s, t - ht)[0]) / (2.0 * ht), (pt(s, t + ht)[1] - pt(s, t - ht)[1]) / (2.0 * ht)];
        assert!((j[0][0] - ds[0]).abs() < 1e-6 && (j[1][0] - ds[1]).abs() < 1e-6);
        assert!((j[0][1] - dt[0]).abs() < 1e-4 && (j[1][1] - dt[1]).abs() < 1e-4);
    }

    #[test]
    fn grading_is_monotone_and_clustered() {
        let g = Grading::geometric(Ends::Both);
        let f = g.faces(0.0, PI, 128).unwrap();
        assert_eq!(f.len(), 129);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[128], PI);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
        let first = f[1] - f[0];
        let mid = f[65] - f[64];
        assert!(mid / first > 3.0);
        assert!(Grading::Uniform.faces(1.0, 0.0, 4).is_err());
        // refinement samples one mapping: the size contrast does not depend on the count
        let contrast = |cells: usize| {
            let f = g.faces(0.0, 1.0, cells).unwrap();
            let w: Vec<f64> = f.windows(2).map(|w| w[1] - w[0]).collect();
            w.iter().cloned().fold(0.0, f64::max) / w.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        assert!((contrast(256) / contrast(512) - 1.0).abs() < 0.02);
    }

    #[test]
    fn bipolar_grid_volumes_and_boundary() {
        let m = BipolarMap::new(0.1).unwrap();
        let g = build_bipolar_grid(m, 32, 16, Grading::Uniform).unwrap();
        assert!(g.volumes.iter().all(|v| *v > 0.0));
        assert!(build_bipolar_grid(m, 4, 16, Grading::Uniform).is_err());
        for &s in &g.xi1.faces[1..] {
            let BipolarImage::Point { r, xn, .. } = m.forward(s, g.xi2.hi()) else { panic!() };
            assert!((r * r + (xn - 1.05).powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bipolar_area_converges_second_order() {
        // Truncated region sigma in [1, pi]: area between the two discs
        // inside the curve sigma = 1, compared against a very fine grid.
        let m = BipolarMap::new(0.1).unwrap();
        let area = |n: usize| {
            let a1 = Axis::new(1.0, PI, n, Grading::Uniform).unwrap();
            let a2 = Axis::new(-m.tau0, m.tau0, n, Grading::Uniform).unwrap();
            let g = CurvilinearGrid::new(Chart::Bipolar(m), a1, a2).unwrap();
            // one-point (midpoint) volumes to expose the O(N^-2) behaviour
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let c = g.logical_center(i, j);
                    s += det2(&m.jacobian(c[0], c[1])).abs() * g.xi1.width(i) * g.xi2.width(j);
                }
            }
            (s, g.volumes.iter().sum::<f64>())
        };
        let (reference, _) = area(1024);
        let (a16, _) = area(16);
        let (a32, _) = area(32);
        let ratio = (a16 - reference).abs() / (a32 - reference).abs();
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        let (_, gauss) = area(32);
        assert!((gauss - reference).abs() < (a32 - reference).abs());
    }

    #[test]
    fn modal_tensor_on_bipolar_is_weighted_identity() {
        let m = BipolarMap::new(0.1).unwrap();
        let g = build_bipolar_grid(m, 16, 8, Grading::Uniform).unwrap();
        let coef = CoefficientField::modal(&g, Dimension::new(3).unwrap(), 1);
        let xi = [1.3, 0.2 * m.tau0];
        let k = coef.tensor(xi);
        let [r, _] = Chart::Bipolar(m).physical(xi).unwrap();
        assert!((k.a11 - r).abs() < 1e-12 * r && (k.a22 - r).abs() < 1e-12 * r && k.a12.abs() < 1e-12 * r);
        assert_eq!(coef.tensor([0.0, 0.2 * m.tau0]), Sym2::default());
        assert_eq!(coef.tensor([PI, 0.0]), Sym2::default());
    }

    #[test]
    fn gap_grid_axis_column_and_ellipticity() {
        let m = ball_map(1e-2);
        let (g, coef) = build_gap_grid(m, Dimension::new(3).unwrap(), 1, 32, 8, Grading::geometric(Ends::Low)).unwrap();
        let c = m.gap_coefficients([0.0, 0.0]).unwrap();
        assert_eq!((c.tangential, c.cross), (m.eps, 0.0));
        assert!((c.normal - 4.0 * m.eps).abs() < 1e-16);
        let ratio = coef.ellipticity_ratio(&g);
        assert!(ratio.is_finite() && ratio >= 1.0);
        assert_eq!(coef.tensor([0.0, 0.0]), Sym2::default());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let g = build_cartesian_grid((0.0, 1.0), (0.0, 1.0), 8, 8, Grading::Uniform, Grading::Uniform).unwrap();
        let mut buf = Vec::new();
        g.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("i,j,x1,x2,r,xn,cell_volume\n"));
        assert_eq!(text.lines().count(), 65);
    }

    #[test]
    fn fmt12_is_canonical() {
        assert_eq!(fmt12(0.0), "0");
        assert_eq!(fmt12(0.5), "0.5");
        assert_eq!(fmt12(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt12(2f64.sqrt() - 1.0), "0.414213562373");
    }
}
