//! Radial modal operators
//!
//! `L_k V = V'' + ((n-2)/r + 2r/(eps+r^2)) V' - mu/r^2 V`, `mu = k(k+n-3)`,
//! on `(a_cut, 1)`.
//!
//! In `t = ln r` the operator is `(Q V_t)_t - mu Q V = r^2 Q L_k V` with
//! `Q = r^(n-3)(eps + r^2)`. Every grid here is uniform in `t`, anchored at
//! `r = 1`, so grids with cut-offs `a`, `a/2`, `a/4` share their nodes and
//! the three-point discretisation is a symmetric M-matrix.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fit::fit_rate;
use crate::linalg::{thomas_solve, Tridiagonal};
use crate::rates::{alpha, alpha_k, beta_star, Dimension};

/// Nodes per halving of `r` unless stated otherwise.
pub const DEFAULT_PER_OCTAVE: u32 = 256;

/// `max(1e-8, 1e-4 eps)`.
pub fn default_a_cut(eps: f64) -> f64 {
    (1e-4 * eps).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalOperatorParams {
    pub n: Dimension,
    pub eps: f64,
    pub k: u32,
    pub mu: f64,
}

impl ModalOperatorParams {
    pub fn new(n: Dimension, eps: f64, k: u32) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return domain(format!("eps must be positive and finite, got {eps}"));
        }
        Ok(Self { n, eps, k, mu: n.sphere_eigenvalue(k) })
    }

    /// `r^(n-3) (eps + r^2)`.
    pub fn flux_weight(&self, r: f64) -> f64 {
        r.powi(self.n.get() as i32 - 3) * (self.eps + r * r)
    }

    /// `L_k` applied to a function given its value and first two derivatives.
    pub fn apply_exact(&self, r: f64, v: f64, dv: f64, d2v: f64) -> f64 {
        let n2 = self.n.as_f64() - 2.0;
        d2v + (n2 / r + 2.0 * r / (self.eps + r * r)) * dv - self.mu / (r * r) * v
    }
}

/// Strictly increasing radii `a_cut = r_0 < ... < r_M = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub nodes: Vec<f64>,
    /// Nodes per halving when the grid is log-uniform.
    pub per_octave: Option<u32>,
}

impl RadialGrid {
    /// Log-uniform grid whose cut-off is the largest lattice point `<= a_cut`.
    pub fn log_uniform(a_cut: f64, per_octave: u32) -> Result<Self> {
        if !(a_cut > 0.0 && a_cut < 1.0) {
            return domain(format!("a_cut must lie in (0, 1), got {a_cut}"));
        }
        if per_octave < 2 {
            return domain("need at least two nodes per octave");
        }
        let step = std::f64::consts::LN_2 / per_octave as f64;
        let m = ((-a_cut.ln()) / step - 1e-9).ceil().max(2.0) as usize;
        Ok(Self::lattice(m, per_octave))
    }

    fn lattice(m: usize, per_octave: u32) -> Self {
        let step = std::f64::consts::LN_2 / per_octave as f64;
        let nodes = (0..=m).rev().map(|i| if i == 0 { 1.0 } else { (-(i as f64) * step).exp() }).collect();
        Self { nodes, per_octave: Some(per_octave) }
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidGrid("radial grid needs at least 3 nodes".into()));
        }
        if !(nodes[0] > 0.0) || nodes.windows(2).any(|w| !(w[1] > w[0])) || *nodes.last().unwrap() != 1.0 {
            return Err(Error::InvalidGrid("radial nodes must increase strictly from a positive cut-off to 1".into()));
        }
        Ok(Self { nodes, per_octave: None })
    }

    /// Same lattice extended down to `a_cut / 2`.
    pub fn halved(&self) -> Result<Self> {
        let p = self
            .per_octave
            .ok_or_else(|| Error::InvalidGrid("only log-uniform grids can be halved".into()))?;
        Ok(Self::lattice(self.nodes.len() - 1 + p as usize, p))
    }

    pub fn a_cut(&self) -> f64 {
        self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Interior tridiagonal system with Dirichlet data folded into the rhs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSystem {
    pub matrix: Tridiagonal,
    pub rhs: Vec<f64>,
    /// Row diagonal dominance; a `false` here means the grid is too coarse
    /// for the maximum principle to be inherited.
    pub dominant: bool,
}

struct Stencil {
    west: f64,
    east: f64,
    centre: f64,
}

fn stencil(params: &ModalOperatorParams, r: &[f64], j: usize) -> Stencil {
    let (tm, t0, tp) = (r[j - 1].ln(), r[j].ln(), r[j + 1].ln());
    let (hm, hp) = (t0 - tm, tp - t0);
    let c = 2.0 / (hm + hp);
    let west = c * params.flux_weight((r[j - 1] * r[j]).sqrt()) / hm;
    let east = c * params.flux_weight((r[j] * r[j + 1]).sqrt()) / hp;
    Stencil { west, east, centre: west + east + params.mu * params.flux_weight(r[j]) }
}

/// Assembles `-r^2 Q L_k` at the interior nodes with `V(a_cut) = left`,
/// `V(1) = right`.
pub fn assemble_modal_bvp(params: &ModalOperatorParams, grid: &RadialGrid, left: f64, right: f64) -> Result<ModalSystem> {
    let r = &grid.nodes;
    let m = r.len();
    if m < 3 {
        return Err(Error::InvalidGrid("radial grid needs at least 3 nodes".into()));
    }
    let unknowns = m - 2;
    let mut sub = Vec::with_capacity(unknowns - 1);
    let mut main = Vec::with_capacity(unknowns);
    let mut sup = Vec::with_capacity(unknowns - 1);
    let mut rhs = vec![0.0; unknowns];
    for j in 1..m - 1 {
        let s = stencil(params, r, j);
        main.push(s.centre);
        if j > 1 {
            sub.push(-s.west);
        } else {
            rhs[0] += s.west * left;
        }
        if j < m - 2 {
            sup.push(-s.east);
        } else {
            rhs[unknowns - 1] += s.east * right;
        }
    }
    let matrix = Tridiagonal::new(sub, main, sup)?;
    let dominant = matrix.is_diagonally_dominant();
    Ok(ModalSystem { matrix, rhs, dominant })
}

/// Discrete `L_k V` at the interior nodes.
pub fn discrete_operator(params: &ModalOperatorParams, grid: &RadialGrid, values: &[f64]) -> Result<Vec<f64>> {
    let r = &grid.nodes;
    if values.len() != r.len() {
        return Err(Error::DimensionMismatch { expected: r.len(), got: values.len() });
    }
    Ok((1..r.len() - 1)
        .map(|j| {
            let s = stencil(params, r, j);
            let row = s.centre * values[j] - s.west * values[j - 1] - s.east * values[j + 1];
            -row / (r[j] * r[j] * params.flux_weight(r[j]))
        })
        .collect())
}

/// Nodal solution of `L_k V = 0` with Dirichlet data at both ends.
pub fn solve_dirichlet(params: &ModalOperatorParams, grid: &RadialGrid, left: f64, right: f64) -> Result<Vec<f64>> {
    let sys = assemble_modal_bvp(params, grid, left, right)?;
    let inner = thomas_solve(&sys.matrix, &sys.rhs)?;
    let mut v = Vec::with_capacity(grid.len());
    v.push(left);
    v.extend(inner);
    v.push(right);
    Ok(v)
}

/// Second-order nodal derivative `dV/dr`.
fn nodal_derivative(r: &[f64], v: &[f64]) -> Vec<f64> {
    let m = r.len();
    let t: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let three_point = |i0: usize, i1: usize, i2: usize, at: usize| {
        // derivative in t of the quadratic through three nodes
        let (a, b, c) = (t[i0], t[i1], t[i2]);
        let x = t[at];
        v[i0] * (2.0 * x - b - c) / ((a - b) * (a - c))
            + v[i1] * (2.0 * x - a - c) / ((b - a) * (b - c))
            + v[i2] * (2.0 * x - a - b) / ((c - a) * (c - b))
    };
    (0..m)
        .map(|j| {
            let dt = if j == 0 {
                three_point(0, 1, 2, 0)
            } else if j == m - 1 {
                three_point(m - 3, m - 2, m - 1, m - 1)
            } else {
                three_point(j - 1, j, j + 1, j)
            };
            dt / r[j]
        })
        .collect()
}

/// Record of the three-level cut-off extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub a_cuts: [f64; 3],
    /// Value at the coarsest cut-off radius for each level.
    pub values_at_a: [f64; 3],
    pub estimate_at_a: f64,
    pub observed_order: f64,
    /// `max |V_{a/2} - V_{a/4}| / max |V_{a/4}|` on the shared nodes.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    pub grid: RadialGrid,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub left_value: f64,
    pub right_value: f64,
    pub extrapolation: Option<Extrapolation>,
}

impl OdeSolution {
    pub fn new(grid: RadialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite ODE value".into()));
        }
        let derivatives = nodal_derivative(&grid.nodes, &values);
        Ok(Self {
            left_value: values[0],
            right_value: *values.last().unwrap(),
            grid,
            values,
            derivatives,
            extrapolation: None,
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.grid.nodes
    }

    /// Piecewise-linear interpolation in `ln r`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        let nodes = &self.grid.nodes;
        if !(r >= nodes[0] && r <= 1.0) {
            return domain(format!("radius {r} outside [{}, 1]", nodes[0]));
        }
        let j = nodes.partition_point(|&x| x <= r).clamp(1, nodes.len() - 1);
        let (t0, t1) = (nodes[j - 1].ln(), nodes[j].ln());
        let s = (r.ln() - t0) / (t1 - t0);
        Ok(self.values[j - 1] + s * (self.values[j] - self.values[j - 1]))
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }
}

/// Bounded solution of `L h = 0`, `h(1) = 1`, from `h(a) = a` at the
/// cut-offs `a`, `a/2`, `a/4` with Richardson extrapolation in `a`.
pub fn solve_h(params: &ModalOperatorParams, a_cut: f64, per_octave: u32) -> Result<OdeSolution> {
    if params.k != 1 {
        return domain(format!("h is the k = 1 solution, got k = {}", params.k));
    }
    let grids = {
        let g0 = RadialGrid::log_uniform(a_cut, per_octave)?;
        let g1 = g0.halved()?;
        let g2 = g1.halved()?;
        [g0, g1, g2]
    };
    let coarse = grids[0].len();
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(3);
    for g in &grids {
        let v = solve_dirichlet(params, g, g.a_cut(), 1.0)?;
        levels.push(v[g.len() - coarse..].to_vec());
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let d01 = diff(&levels[0], &levels[1]);
    let d12 = diff(&levels[1], &levels[2]);
    let order = if d12 > 0.0 && d01 > 0.0 { (d01 / d12).log2().clamp(1.0, 8.0) } else { 1.0 };
    let factor = 1.0 / (2f64.powf(order) - 1.0);
    let values: Vec<f64> = levels[2].iter().zip(&levels[1]).map(|(f, c)| f + (f - c) * factor).collect();
    let scale = levels[2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let record = Extrapolation {
        a_cuts: [grids[0].a_cut(), grids[1].a_cut(), grids[2].a_cut()],
        values_at_a: [levels[0][0], levels[1][0], levels[2][0]],
        estimate_at_a: values[0],
        observed_order: order,
        spread: d12 / scale,
    };
    let mut sol = OdeSolution::new(grids[0].clone(), values)?;
    sol.extrapolation = Some(record);
    if !sol.is_strictly_increasing() {
        return Err(Error::Invariant("computed h is not strictly increasing".into()));
    }
    Ok(sol)
}

/// Outcome of checking `r < h < r^alpha` and the lower envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HCertificate {
    pub n: u32,
    pub eps: f64,
    pub beta: f64,
    pub alpha: f64,
    /// `min (h - r)` over interior nodes.
    pub lower_margin: f64,
    /// `min (r^alpha - h)` over interior nodes.
    pub upper_margin: f64,
    /// `min h / r`.
    pub lower_ratio: f64,
    /// `max h / r^alpha`.
    pub upper_ratio: f64,
    pub monotone: bool,
    /// `inf h / (r^beta (eps + r^2)^((alpha - beta)/2))`, the fitted `1/C(beta)`.
    pub envelope_constant: f64,
    pub envelope_argmin: f64,
    pub spread: f64,
    pub bounds_hold: bool,
}

/// One-sided slack for the pointwise bounds.
pub const H_BOUND_SLACK: f64 = 1e-8;

/// `r^beta (eps + r^2)^((alpha - beta)/2)`.
pub fn lower_envelope(r: f64, eps: f64, alpha: f64, beta: f64) -> f64 {
    (beta * r.ln() + 0.5 * (alpha - beta) * (eps + r * r).ln()).exp()
}

pub fn verify_h_bounds(sol: &OdeSolution, n: Dimension, eps: f64, beta: f64) -> Result<HCertificate> {
    let threshold = beta_star(n);
    if beta < threshold - 1e-12 {
        return domain(format!(
            "beta = {beta} is below the subsolution threshold {threshold}; the envelope is not a subsolution"
        ));
    }
    let a = alpha(n);
    let r = sol.radii();
    let h = &sol.values;
    let m = r.len();
    let mut cert = HCertificate {
        n: n.get(),
        eps,
        beta,
        alpha: a,
        lower_margin: f64::INFINITY,
        upper_margin: f64::INFINITY,
        lower_ratio: f64::INFINITY,
        upper_ratio: 0.0,
        monotone: sol.is_strictly_increasing(),
        envelope_constant: f64::INFINITY,
        envelope_argmin: f64::NAN,
        spread: sol.extrapolation.as_ref().map_or(0.0, |e| e.spread),
        bounds_hold: false,
    };
    for j in 0..m {
        let ra = r[j].powf(a);
        cert.lower_ratio = cert.lower_ratio.min(h[j] / r[j]);
        cert.upper_ratio = cert.upper_ratio.max(h[j] / ra);
        if j + 1 < m {
            cert.lower_margin = cert.lower_margin.min(h[j] - r[j]);
            cert.upper_margin = cert.upper_margin.min(ra - h[j]);
        }
        let ratio = h[j] / lower_envelope(r[j], eps, a, beta);
        if ratio < cert.envelope_constant {
            cert.envelope_constant = ratio;
            cert.envelope_argmin = r[j];
        }
    }
    cert.bounds_hold = cert.monotone && cert.lower_margin > -H_BOUND_SLACK && cert.upper_margin > -H_BOUND_SLACK;
    Ok(cert)
}

/// Outcome of a single modal decay check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRecord {
    pub n: u32,
    pub k: u32,
    pub eps: f64,
    pub alpha_k: f64,
    /// `max |V(r)| / (r^alpha_k |V(1)|)`.
    pub max_ratio: f64,
    pub argmax: f64,
    /// Log-slope of `|V|` over `r` in `[1/2, 1]`.
    pub slope_near_one: f64,
    pub holds: bool,
    pub solution: OdeSolution,
}

pub const DECAY_SLACK: f64 = 1e-6;

/// Bounded mode with `V(1) = v1`, selected by `V(a_cut) = 0`.
///
/// The lattice is refined by `ceil(alpha_k)` since the margin of the
/// supersolution `r^alpha_k` is only `O(eps)` near `r = 1` while the
/// truncation error grows like `(alpha_k dt)^2`.
pub fn modal_decay_check(params: &ModalOperatorParams, a_cut: f64, per_octave: u32, v1: f64) -> Result<DecayRecord> {
    if params.k == 0 {
        return domain("modal decay needs k >= 1 (the k = 0 bound is vacuous)");
    }
    if v1 == 0.0 {
        return domain("boundary value must be non-zero");
    }
    let ak = alpha_k(params.n, i64::from(params.k))?;
    let grid = RadialGrid::log_uniform(a_cut, per_octave * ak.ceil().max(1.0) as u32)?;
    let values = solve_dirichlet(params, &grid, 0.0, v1)?;
    let mut max_ratio = 0.0f64;
    let mut argmax = 1.0;
    for (r, v) in grid.nodes.iter().zip(&values) {
        let ratio = v.abs() / (r.powf(ak) * v1.abs());
        if ratio > max_ratio {
            max_ratio = ratio;
            argmax = *r;
        }
    }
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let slope = fit_rate(&grid.nodes, &abs, Some((0.5, 1.0)))?.slope;
    Ok(DecayRecord {
        n: params.n.get(),
        k: params.k,
        eps: params.eps,
        alpha_k: ak,
        max_ratio,
        argmax,
        slope_near_one: slope,
        holds: max_ratio <= 1.0 + DECAY_SLACK,
        solution: OdeSolution::new(grid, values)?,
    })
}

/// Forcing `H = A' + B` sampled on a radial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingDecomposition {
    pub radii: Vec<f64>,
    pub a: Vec<f64>,
    pub da: Vec<f64>,
    pub b: Vec<f64>,
    /// `sup |A(r)| / r`.
    pub a_bound: f64,
    /// `sup |B(r)|`.
    pub b_bound: f64,
}

impl ForcingDecomposition {
    pub fn from_fns(
        grid: &RadialGrid,
        a: impl Fn(f64) -> f64,
        da: impl Fn(f64) -> f64,
        b: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let radii = grid.nodes.clone();
        let av: Vec<f64> = radii.iter().map(|&r| a(r)).collect();
        let dav: Vec<f64> = radii.iter().map(|&r| da(r)).collect();
        let bv: Vec<f64> = radii.iter().map(|&r| b(r)).collect();
        if av.iter().chain(&dav).chain(&bv).any(|v| !v.is_finite()) {
            return domain("forcing samples must be finite");
        }
        let a_bound = radii.iter().zip(&av).map(|(r, v)| v.abs() / r).fold(0.0, f64::max);
        let b_bound = bv.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Ok(Self { radii, a: av, da: dav, b: bv, a_bound, b_bound })
    }

    pub fn zero(grid: &RadialGrid) -> Self {
        Self::from_fns(grid, |_| 0.0, |_| 0.0, |_| 0.0).expect("zero forcing is finite")
    }

    /// `H = A' + B`.
    pub fn h_values(&self) -> Vec<f64> {
        self.da.iter().zip(&self.b).map(|(x, y)| x + y).collect()
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Running trapezoid integral in `t = ln r` of `f(r) r`, starting from `start`.
fn prefix_integral(r: &[f64], f: &[f64], start: f64) -> Vec<f64> {
    let mut acc = CompensatedSum::default();
    acc.add(start);
    let mut out = Vec::with_capacity(r.len());
    out.push(acc.value());
    for j in 1..r.len() {
        let dt = r[j].ln() - r[j - 1].ln();
        acc.add(0.5 * dt * (f[j] * r[j] + f[j - 1] * r[j - 1]));
        out.push(acc.value());
    }
    out
}

/// Bounded solution `v = h w` of `L v = H` by reduction of order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticularSolution {
    pub solution: OdeSolution,
    pub w: Vec<f64>,
    /// `int_0^r h tau^(n-2) (eps + tau^2) H dtau`, which equals `G w'`.
    pub inner: Vec<f64>,
    /// `sup |v| / r^(1+alpha)`.
    pub growth_constant: f64,
}

pub fn particular_solution(
    params: &ModalOperatorParams,
    h: &OdeSolution,
    forcing: &ForcingDecomposition,
) -> Result<ParticularSolution> {
    if params.k != 1 {
        return domain("reduction of order is set up for the k = 1 operator");
    }
    let r = h.radii();
    if forcing.radii.as_slice() != r {
        return Err(Error::DimensionMismatch { expected: r.len(), got: forcing.radii.len() });
    }
    let n = params.n.get() as i32;
    let eps = params.eps;
    let big_h = forcing.h_values();
    let p = |x: f64| x.powi(n - 2) * (eps + x * x);
    let f: Vec<f64> = (0..r.len()).map(|j| h.values[j] * p(r[j]) * big_h[j]).collect();
    // h ~ r, so f ~ r^(n-1) and its integral over [0, a] is about f(a) a / n
    let a = r[0];
    let inner = prefix_integral(r, &f, f[0] * a / n as f64);
    let g: Vec<f64> = (0..r.len()).map(|j| h.values[j] * h.values[j] * p(r[j])).collect();
    if g.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Invariant("G = h^2 r^(n-2)(eps + r^2) must be positive; h vanished".into()));
    }
    let dw: Vec<f64> = inner.iter().zip(&g).map(|(i, g)| i / g).collect();
    // I / G is asymptotically constant on [0, a]
    let w = prefix_integral(r, &dw, dw[0] * a);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant(format!("quadrature near r = {a} produced a non-finite value")));
    }
    let values: Vec<f64> = w.iter().zip(&h.values).map(|(w, h)| w * h).collect();
    let al = alpha(params.n);
    let growth_constant = r.iter().zip(&values).map(|(r, v)| v.abs() / r.powf(1.0 + al)).fold(0.0, f64::max);
    Ok(ParticularSolution { solution: OdeSolution::new(h.grid.clone(), values)?, w, inner, growth_constant })
}

/// `U ~ C1 h + D r^(1+alpha)` on a fit window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct U11Decomposition {
    pub c1: f64,
    pub d: f64,
    /// Log-slope of `|U - C1 h|`; `None` when the remainder vanishes.
    pub remainder_slope: Option<f64>,
    pub max_relative_residual: f64,
    pub samples: usize,
}

/// Relative least-squares split of sampled `U(r)` into the `h` component and
/// an `r^(1+alpha)` remainder over `window`.
pub fn u11_decompose(r: &[f64], u: &[f64], h: &OdeSolution, n: Dimension, window: (f64, f64)) -> Result<U11Decomposition> {
    if r.len() != u.len() {
        return Err(Error::DimensionMismatch { expected: r.len(), got: u.len() });
    }
    let al = alpha(n);
    let mut rows = Vec::new();
    for (&ri, &ui) in r.iter().zip(u) {
        if ri < window.0 || ri > window.1 {
            continue;
        }
        if !(ui > 0.0) {
            return domain(format!("U must be positive on the fit window, got {ui} at r = {ri}"));
        }
        rows.push((ri, ui, h.eval(ri)?));
    }
    if rows.len() < 3 {
        return Err(Error::IllConditioned(format!("{} samples in the fit window", rows.len())));
    }
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(ri, ui, hi) in &rows {
        let x1 = hi / ui;
        let x2 = ri.powf(1.0 + al) / ui;
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        b1 += x1;
        b2 += x2;
    }
    let det = s11 * s22 - s12 * s12;
    if !(det > 1e-14 * s11 * s22) {
        return Err(Error::IllConditioned("h and r^(1+alpha) are indistinguishable on the window".into()));
    }
    let c1 = (b1 * s22 - b2 * s12) / det;
    let d = (s11 * b2 - s12 * b1) / det;
    let mut max_relative_residual = 0.0f64;
    let mut rem_r = Vec::new();
    let mut rem = Vec::new();
    for &(ri, ui, hi) in &rows {
        max_relative_residual = max_relative_residual.max((ui - c1 * hi - d * ri.powf(1.0 + al)).abs() / ui);
        let e = (ui - c1 * hi).abs();
        if e > 1e-12 * ui {
            rem_r.push(ri);
            rem.push(e);
        }
    }
    let remainder_slope = if rem.len() == rows.len() { fit_rate(&rem_r, &rem, None).ok().map(|f| f.slope) } else { None };
    Ok(U11Decomposition { c1, d, remainder_slope, max_relative_residual, samples: rows.len() })
}

/// `sup |F| / (r^gamma (eps + r^2)^(1-s))` over samples with `r > 0`.
pub fn weighted_norm(r: &[f64], f: &[f64], eps: f64, gamma: f64, s: f64) -> f64 {
    r.iter()
        .zip(f)
        .filter(|(r, _)| **r > 0.0)
        .map(|(&r, &v)| v.abs() / (r.powf(gamma) * (eps + r * r).powf(1.0 - s)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub rho: Vec<f64>,
    pub omega: Vec<f64>,
    /// Log-log slope of `omega` over all `rho`; `None` when `omega` vanishes.
    pub slope: Option<f64>,
}

/// `omega(rho) = sqrt(sum_k V_k(rho)^2)`; `modes[k][i]` is `V_k(rho[i])`.
pub fn decay_profile(rho: &[f64], modes: &[Vec<f64>]) -> Result<DecayProfile> {
    for m in modes {
        if m.len() != rho.len() {
            return Err(Error::DimensionMismatch { expected: rho.len(), got: m.len() });
        }
    }
    let omega: Vec<f64> = (0..rho.len()).map(|i| modes.iter().map(|m| m[i] * m[i]).sum::<f64>().sqrt()).collect();
    let slope = if omega.iter().all(|w| *w > 0.0) { fit_rate(rho, &omega, None).ok().map(|f| f.slope) } else { None };
    Ok(DecayProfile { rho: rho.to_vec(), omega, slope })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dim(n: u32) -> Dimension {
        Dimension::new(n).unwrap()
    }

    fn params(n: u32, eps: f64, k: u32) -> ModalOperatorParams {
        ModalOperatorParams::new(dim(n), eps, k).unwrap()
    }

    #[test]
    fn grids_share_nodes() {
        let g = RadialGrid::log_uniform(1e-3, 16).unwrap();
        let h = g.halved().unwrap();
        assert_eq!(*g.nodes.last().unwrap(), 1.0);
        assert!(g.a_cut() <= 1e-3 && g.a_cut() > 1e-3 * 2f64.powf(-1.0 / 16.0));
        assert_eq!(h.len(), g.len() + 16);
        assert_eq!(&h.nodes[16..], &g.nodes[..]);
        assert!((h.a_cut() - 0.5 * g.a_cut()).abs() < 1e-15);
        assert!(RadialGrid::log_uniform(0.0, 16).is_err());
        assert!(RadialGrid::from_nodes(vec![0.1, 0.05, 1.0]).is_err());
    }

    #[test]
    fn constant_is_annihilated_by_l0() {
        let p = params(4, 1e-2, 0);
        let g = RadialGrid::log_uniform(1e-3, 32).unwrap();
        let res = discrete_operator(&p, &g, &vec![3.0; g.len()]).unwrap();
        // compare against the size of a single stencil term, 3 / dt^2 / r^2
        let dt = std::f64::consts::LN_2 / 32.0;
        assert!(g.nodes[1..g.len() - 1].iter().zip(&res).all(|(r, v)| v.abs() * r * r * dt * dt < 1e-13));
    }

    #[test]
    fn identity_residual_is_second_order() {
        let p = params(3, 1e-2, 1);
        let err = |per: u32| {
            let g = RadialGrid::log_uniform(1e-2, per).unwrap();
            let lr = discrete_operator(&p, &g, &g.nodes).unwrap();
            g.nodes[1..g.len() - 1]
                .iter()
                .zip(&lr)
                .map(|(r, v)| ((v - 2.0 * r / (p.eps + r * r)) / (2.0 * r / (p.eps + r * r))).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(32), err(64));
        let order = (e1 / e2).log2();
        assert!(e2 < 1e-3 && (order - 2.0).abs() < 0.1, "errors {e1} {e2}");
    }

    #[test]
    fn manufactured_square_converges_second_order() {
        let p = params(4, 1e-2, 2);
        let exact = |r: f64| p.apply_exact(r, r * r, 2.0 * r, 2.0);
        let err = |per: u32| {
            let g = RadialGrid::log_uniform(0.05, per).unwrap();
            let v: Vec<f64> = g.nodes.iter().map(|r| r * r).collect();
            let lv = discrete_operator(&p, &g, &v).unwrap();
            g.nodes[1..g.len() - 1].iter().zip(&lv).map(|(r, x)| (x - exact(*r)).abs()).fold(0.0, f64::max)
        };
        let order = (err(16) / err(32)).log2();
        assert!((order - 2.0).abs() < 0.15, "order {order}");
    }

    #[test]
    fn system_is_dominant_and_symmetric() {
        let p = params(3, 1e-3, 1);
        let g = RadialGrid::log_uniform(1e-6, 64).unwrap();
        let s = assemble_modal_bvp(&p, &g, g.a_cut(), 1.0).unwrap();
        assert!(s.dominant);
        let csr = s.matrix.to_csr();
        assert!(csr.check_symmetric(1e-12).is_ok());
    }

    #[test]
    fn h_properties() {
        for n in [3, 4, 5] {
            for eps in [1e-2, 1e-4] {
                let p = params(n, eps, 1);
                let h = solve_h(&p, default_a_cut(eps), 128).unwrap();
                assert_eq!(*h.values.last().unwrap(), 1.0);
                assert!(h.is_strictly_increasing());
                let cert = verify_h_bounds(&h, dim(n), eps, beta_star(dim(n))).unwrap();
                assert!(cert.bounds_hold, "{cert:?}");
                assert!(cert.lower_margin > 0.0 && cert.upper_margin > 0.0);
                assert!(cert.upper_ratio <= 1.0 + 1e-12 && cert.lower_ratio >= 1.0 - 1e-12);
                assert!(cert.spread < 1e-4);
                assert!(cert.envelope_constant > 0.0 && cert.envelope_constant <= (1.0 + eps).powf(0.5 * (cert.beta - cert.alpha)) + 1e-12);
            }
        }
    }

    #[test]
    fn h_rejects_low_beta_and_wrong_mode() {
        let p = params(3, 1e-2, 1);
        let h = solve_h(&p, 1e-6, 32).unwrap();
        assert!(verify_h_bounds(&h, dim(3), 1e-2, beta_star(dim(3)) - 0.2).is_err());
        assert!(solve_h(&params(3, 1e-2, 2), 1e-6, 32).is_err());
    }

    #[test]
    fn h_is_unique_across_cutoff_schedules() {
        let p = params(3, 1e-3, 1);
        let h1 = solve_h(&p, 1e-7, 64).unwrap();
        let h2 = solve_h(&p, 1e-8, 64).unwrap();
        let gap = h1
            .radii()
            .iter()
            .zip(&h1.values)
            .map(|(r, v)| (h2.eval(*r).unwrap() - v).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn h_tends_to_power_for_large_radius() {
        // for r >> sqrt(eps), h is close to r^alpha
        let p = params(3, 1e-6, 1);
        let h = solve_h(&p, 1e-10, 64).unwrap();
        let a = alpha(dim(3));
        assert!((h.eval(0.5).unwrap() / 0.5f64.powf(a) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn decay_bound_holds_and_orders_modes() {
        let r1 = modal_decay_check(&params(3, 1e-3, 1), 1e-7, 64, 1.0).unwrap();
        assert!(r1.holds, "{}", r1.max_ratio);
        let r2 = modal_decay_check(&params(3, 1e-3, 2), 1e-7, 64, -2.0).unwrap();
        assert!(r2.holds);
        assert!(r2.slope_near_one > r1.slope_near_one);
        assert!(modal_decay_check(&params(3, 1e-3, 0), 1e-7, 64, 1.0).is_err());
    }

    #[test]
    fn large_eps_gives_euler_exponent() {
        let p = params(3, 1e4, 1);
        let rec = modal_decay_check(&p, 1e-6, 64, 1.0).unwrap();
        let n: f64 = 3.0;
        // c^2 + (n-3) c - mu = 0
        let c = 0.5 * (-(n - 3.0) + ((n - 3.0).powi(2) + 4.0 * p.mu).sqrt());
        assert!((rec.slope_near_one - c).abs() < 1e-3, "{}", rec.slope_near_one);
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let p = params(3, 1e-3, 1);
        let h = solve_h(&p, 1e-7, 32).unwrap();
        let ps = particular_solution(&p, &h, &ForcingDecomposition::zero(&h.grid)).unwrap();
        assert!(ps.solution.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn particular_solution_is_bounded_and_solves() {
        let p = params(3, 1e-3, 1);
        let h = solve_h(&p, 1e-7, 128).unwrap();
        let forcing = ForcingDecomposition::from_fns(&h.grid, |r| r, |_| 1.0, |_| 0.0).unwrap();
        assert!((forcing.a_bound - 1.0).abs() < 1e-12);
        let ps = particular_solution(&p, &h, &forcing).unwrap();
        let a = alpha(dim(3));
        let bounded = h
            .radii()
            .iter()
            .zip(&ps.solution.values)
            .filter(|(r, _)| **r >= 1e-3)
            .map(|(r, v)| v.abs() / r.powf(1.0 + a))
            .fold(0.0, f64::max);
        assert!(bounded.is_finite() && bounded < 10.0);
        let lv = discrete_operator(&p, &h.grid, &ps.solution.values).unwrap();
        let r = h.radii();
        let worst = (1..r.len() - 1).filter(|&j| r[j] > 1e-4).map(|j| (lv[j - 1] - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-2, "residual {worst}");
        // (G w')' against h H r^(n-2)(eps + r^2)
        let j = r.partition_point(|&x| x < 0.1);
        let dt = r[j + 1].ln() - r[j - 1].ln();
        let d_inner = (ps.inner[j + 1] - ps.inner[j - 1]) / (dt * r[j]);
        let target = h.values[j] * r[j] * (p.eps + r[j] * r[j]);
        assert!((d_inner / target - 1.0).abs() < 1e-3, "{d_inner} {target}");
    }

    #[test]
    fn u11_split_recovers_synthetic_coefficients() {
        let p = params(3, 1e-3, 1);
        let h = solve_h(&p, 1e-7, 128).unwrap();
        let a = alpha(dim(3));
        let r: Vec<f64> = (0..40).map(|i| 1e-3 * 1.15f64.powi(i)).filter(|r| *r < 1.0).collect();
        let two_h: Vec<f64> = r.iter().map(|x| 2.0 * h.eval(*x).unwrap()).collect();
        let d = u11_decompose(&r, &two_h, &h, dim(3), (1e-3, 0.5)).unwrap();
        assert!((d.c1 - 2.0).abs() < 1e-9 && d.remainder_slope.is_none());
        let mixed: Vec<f64> = r.iter().map(|x| h.eval(*x).unwrap() + x.powf(1.0 + a)).collect();
        let d = u11_decompose(&r, &mixed, &h, dim(3), (1e-3, 0.5)).unwrap();
        assert!((d.c1 - 1.0).abs() < 1e-3);
        assert!((d.remainder_slope.unwrap() - (1.0 + a)).abs() < 1e-6);
        assert!(u11_decompose(&r, &mixed, &h, dim(3), (0.2, 0.21)).is_err());
    }

    #[test]
    fn weighted_norm_cases() {
        let r: Vec<f64> = (1..50).map(|i| i as f64 / 50.0).collect();
        let (eps, gamma, s) = (1e-3, 0.4, 0.2);
        let f: Vec<f64> = r.iter().map(|x| x.powf(gamma) * (eps + x * x).powf(1.0 - s)).collect();
        assert!((weighted_norm(&r, &f, eps, gamma, s) - 1.0).abs() < 1e-12);
        assert_eq!(weighted_norm(&r, &vec![0.0; r.len()], eps, gamma, s), 0.0);
        let f: Vec<f64> = r.iter().map(|x| x * (eps + x * x)).collect();
        assert!((weighted_norm(&r, &f, eps, 1.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_profile_cases() {
        let rho: Vec<f64> = (0..20).map(|i| 1e-4 * 10f64.powf(i as f64 / 19.0)).collect();
        let (a1, a2) = (alpha_k(dim(3), 1).unwrap(), alpha_k(dim(3), 2).unwrap());
        let v1: Vec<f64> = rho.iter().map(|r| r.powf(a1)).collect();
        let v2: Vec<f64> = rho.iter().map(|r| r.powf(a2)).collect();
        let single = decay_profile(&rho, &[v1.clone()]).unwrap();
        assert!((single.slope.unwrap() - a1).abs() < 1e-12);
        let both = decay_profile(&rho, &[v1.clone(), v2]).unwrap();
        assert!((both.slope.unwrap() - a1).abs() < 0.05);
        let zero = decay_profile(&rho, &[vec![0.0; rho.len()]]).unwrap();
        assert!(zero.omega.iter().all(|w| *w == 0.0) && zero.slope.is_none());
    }
}
