//! Cell-centred finite volumes for `div(K grad u) - q u = div F + s` in the
//! logical coordinates of a [`CurvilinearGrid`].
//!
//! The scheme is the Euler-Lagrange system of a discrete energy: two-point
//! face terms carry `K11` and `K22`, vertex terms carry `K12`, and Neumann
//! edges get one auxiliary unknown per boundary face so that the conormal
//! condition comes out naturally. The matrix is therefore symmetric, and it
//! reduces to the usual five-point stencil when `K12` vanishes.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{
    build_bipolar_grid, BipolarImage, BipolarMap, Chart, CoefficientField, Coefficients, CurvilinearGrid, Ends, Grading,
    InclusionShape, Sym2,
};
use crate::linalg::{bicgstab_solve, pcg_solve_from, CsrMatrix, Preconditioner, SolveReport};
use crate::rates::Dimension;

pub type ScalarFn<'a> = Box<dyn Fn([f64; 2]) -> f64 + Send + Sync + 'a>;
pub type VectorFn<'a> = Box<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync + 'a>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    /// `xi1 = lo`
    West,
    /// `xi1 = hi`
    East,
    /// `xi2 = lo`
    South,
    /// `xi2 = hi`
    North,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::West, Edge::East, Edge::South, Edge::North];
}

/// Boundary condition on one logical edge. Data functions take the logical
/// point on the edge.
pub enum EdgeCondition<'a> {
    Dirichlet(ScalarFn<'a>),
    /// Outward flux `K grad u . n` per unit logical length.
    Neumann(ScalarFn<'a>),
    /// The flux tensor vanishes on the edge, so no condition is imposed.
    NaturalDegenerate,
}

impl<'a> EdgeCondition<'a> {
    pub fn dirichlet_const(v: f64) -> Self {
        Self::Dirichlet(Box::new(move |_| v))
    }

    pub fn insulated() -> Self {
        Self::Neumann(Box::new(|_| 0.0))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dirichlet(_) => "dirichlet",
            Self::Neumann(_) => "neumann",
            Self::NaturalDegenerate => "natural_degenerate",
        }
    }
}

pub struct BoundarySpec<'a> {
    pub west: EdgeCondition<'a>,
    pub east: EdgeCondition<'a>,
    pub south: EdgeCondition<'a>,
    pub north: EdgeCondition<'a>,
}

impl<'a> BoundarySpec<'a> {
    pub fn get(&self, e: Edge) -> &EdgeCondition<'a> {
        match e {
            Edge::West => &self.west,
            Edge::East => &self.east,
            Edge::South => &self.south,
            Edge::North => &self.north,
        }
    }
}

pub struct DiscreteProblem<'a> {
    pub grid: &'a CurvilinearGrid,
    pub coefficients: &'a dyn Coefficients,
    pub bcs: BoundarySpec<'a>,
    /// Logical source density `s`.
    pub source: Option<ScalarFn<'a>>,
    /// Logical flux field `F`.
    pub flux: Option<VectorFn<'a>>,
    /// Zeroth-order eigenvalue used for the modal gradient amplitude.
    pub mu: f64,
}

impl<'a> DiscreteProblem<'a> {
    pub fn new(grid: &'a CurvilinearGrid, coefficients: &'a dyn Coefficients, bcs: BoundarySpec<'a>) -> Self {
        Self { grid, coefficients, bcs, source: None, flux: None, mu: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Unknown(usize),
    Known(f64),
    /// Linear extrapolation from two interior nodes across a natural edge.
    Extrapolated { at: [(usize, usize); 2], c: [f64; 2] },
    /// Corner point; never referenced by the stencil.
    Corner,
}

/// Cell centres padded with one ring of boundary-face points.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    x: Vec<f64>,
    y: Vec<f64>,
    nodes: Vec<Node>,
    unknowns: usize,
}

impl Layout {
    fn nx(&self) -> usize {
        self.x.len()
    }

    fn id(&self, i: usize, j: usize) -> usize {
        i * self.y.len() + j
    }

    fn node(&self, i: usize, j: usize) -> Node {
        self.nodes[self.id(i, j)]
    }
}

fn padded(axis_faces: &[f64], centers: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(centers.len() + 2);
    v.push(axis_faces[0]);
    v.extend_from_slice(centers);
    v.push(*axis_faces.last().expect("non-empty axis"));
    v
}

fn edge_of(i: usize, j: usize, nx: usize, ny: usize) -> Option<Edge> {
    match (i == 0, i == nx - 1, j == 0, j == ny - 1) {
        (true, _, false, false) => Some(Edge::West),
        (_, true, false, false) => Some(Edge::East),
        (false, false, true, _) => Some(Edge::South),
        (false, false, _, true) => Some(Edge::North),
        _ => None,
    }
}

fn build_layout(grid: &CurvilinearGrid, bcs: &BoundarySpec) -> Layout {
    let x = padded(&grid.xi1.faces, &grid.xi1.centers);
    let y = padded(&grid.xi2.faces, &grid.xi2.centers);
    let (nx, ny) = (x.len(), y.len());
    let cells = grid.len();
    let mut next = cells;
    let mut nodes = Vec::with_capacity(nx * ny);
    let extrapolate = |pos: &[f64], edge: usize, a: usize, b: usize| {
        let cb = (pos[edge] - pos[a]) / (pos[b] - pos[a]);
        [1.0 - cb, cb]
    };
    for i in 0..nx {
        for j in 0..ny {
            let interior = (1..nx - 1).contains(&i) && (1..ny - 1).contains(&j);
            let node = if interior {
                Node::Unknown((i - 1) * (ny - 2) + (j - 1))
            } else {
                match edge_of(i, j, nx, ny) {
                    None => corner_node(bcs, i == 0, j == 0, [x[i], y[j]]),
                    Some(e) => match bcs.get(e) {
                        EdgeCondition::Dirichlet(f) => Node::Known(f([x[i], y[j]])),
                        EdgeCondition::Neumann(_) => {
                            next += 1;
                            Node::Unknown(next - 1)
                        }
                        EdgeCondition::NaturalDegenerate => match e {
                            Edge::West => Node::Extrapolated { at: [(1, j), (2, j)], c: extrapolate(&x, 0, 1, 2) },
                            Edge::East => Node::Extrapolated {
                                at: [(nx - 2, j), (nx - 3, j)],
                                c: extrapolate(&x, nx - 1, nx - 2, nx - 3),
                            },
                            Edge::South => Node::Extrapolated { at: [(i, 1), (i, 2)], c: extrapolate(&y, 0, 1, 2) },
                            Edge::North => Node::Extrapolated {
                                at: [(i, ny - 2), (i, ny - 3)],
                                c: extrapolate(&y, ny - 1, ny - 2, ny - 3),
                            },
                        },
                    },
                }
            };
            nodes.push(node);
        }
    }
    Layout { x, y, nodes, unknowns: next }
}

/// Corners only matter for output; they take Dirichlet data from an adjacent
/// edge when there is one.
fn corner_node(bcs: &BoundarySpec<'_>, west: bool, south: bool, at: [f64; 2]) -> Node {
    let e1 = if west { Edge::West } else { Edge::East };
    let e2 = if south { Edge::South } else { Edge::North };
    let data: Vec<f64> = [e1, e2]
        .into_iter()
        .filter_map(|e| match bcs.get(e) {
            EdgeCondition::Dirichlet(f) => Some(f(at)),
            _ => None,
        })
        .collect();
    if data.is_empty() {
        Node::Corner
    } else {
        Node::Known(data.iter().sum::<f64>() / data.len() as f64)
    }
}

/// Linear form `sum c_k u_{node_k}` over at most four padded nodes.
#[derive(Clone, Copy)]
struct Lin {
    at: [(usize, usize); 4],
    c: [f64; 4],
    len: usize,
}

impl Lin {
    fn diff(a: (usize, usize), b: (usize, usize), scale: f64) -> Self {
        Self { at: [b, a, (0, 0), (0, 0)], c: [scale, -scale, 0.0, 0.0], len: 2 }
    }

    fn four(at: [(usize, usize); 4], c: [f64; 4]) -> Self {
        Self { at, c, len: 4 }
    }
}

/// Padded nodes whose combination `a + b - c` fills a corner for display.
fn corner_stencil(layout: &Layout, i: usize, j: usize) -> [(usize, usize); 3] {
    let (nx, ny) = (layout.nx(), layout.y.len());
    let di = if i == 0 { 1 } else { nx - 2 };
    let dj = if j == 0 { 1 } else { ny - 2 };
    [(di, j), (i, dj), (di, dj)]
}

/// Unknown coefficients plus a constant.
fn resolve(layout: &Layout, l: &Lin) -> (Vec<(usize, f64)>, f64) {
    let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(l.len + 2);
    let mut constant = 0.0;
    let mut add = |node: Node, c: f64, coeffs: &mut Vec<(usize, f64)>| match node {
        Node::Unknown(u) => coeffs.push((u, c)),
        Node::Known(v) => constant += c * v,
        Node::Extrapolated { .. } | Node::Corner => unreachable!("nested extrapolation or corner in stencil"),
    };
    for k in 0..l.len {
        if l.c[k] == 0.0 {
            continue;
        }
        let (i, j) = l.at[k];
        match layout.node(i, j) {
            Node::Extrapolated { at, c } => {
                for m in 0..2 {
                    add(layout.node(at[m].0, at[m].1), l.c[k] * c[m], &mut coeffs);
                }
            }
            node => add(node, l.c[k], &mut coeffs),
        }
    }
    (coeffs, constant)
}

struct Builder {
    triplets: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl Builder {
    /// Adds the energy term `w/2 L1 L2`.
    fn product(&mut self, w: f64, a: &(Vec<(usize, f64)>, f64), b: &(Vec<(usize, f64)>, f64)) {
        let h = 0.5 * w;
        for &(p, ap) in &a.0 {
            for &(q, bq) in &b.0 {
                self.triplets.push((p, q, h * ap * bq));
                self.triplets.push((q, p, h * ap * bq));
            }
            self.rhs[p] -= h * ap * b.1;
        }
        for &(q, bq) in &b.0 {
            self.rhs[q] -= h * bq * a.1;
        }
    }
}

/// Assembled linear system.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Number of cell unknowns; auxiliary boundary unknowns follow them.
    pub cells: usize,
    layout: Layout,
}

impl Assembled {
    pub fn unknowns(&self) -> usize {
        self.layout.unknowns
    }
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

fn tensor_scale(k: f64, reference: f64) -> bool {
    k.abs() <= 1e-12 * reference
}

pub fn assemble(problem: &DiscreteProblem<'_>) -> Result<Assembled> {
    let grid = problem.grid;
    let coef = problem.coefficients;
    let layout = build_layout(grid, &problem.bcs);
    let (n1, n2) = (grid.n1(), grid.n2());
    let (nx, ny) = (layout.nx(), layout.y.len());
    let mut b = Builder { triplets: Vec::with_capacity(12 * layout.unknowns), rhs: vec![0.0; layout.unknowns] };

    // reference magnitude for degeneracy checks
    let mut kref = 0.0f64;
    for i in 0..n1 {
        for j in 0..n2 {
            let k = coef.tensor(grid.logical_center(i, j));
            if !k.is_positive_semidefinite() || !(k.a11.is_finite() && k.a22.is_finite() && k.a12.is_finite()) {
                return Err(Error::Indefinite { i, j });
            }
            kref = kref.max(k.a11.abs()).max(k.a22.abs());
        }
    }

    // natural edges must carry no normal flux
    for e in Edge::ALL {
        if !matches!(problem.bcs.get(e), EdgeCondition::NaturalDegenerate) {
            continue;
        }
        let (faces, normal): (Vec<[f64; 2]>, fn(&Sym2) -> f64) = match e {
            Edge::West | Edge::East => {
                let x = if e == Edge::West { grid.xi1.lo() } else { grid.xi1.hi() };
                (grid.xi2.centers.iter().map(|&y| [x, y]).collect(), |k| k.a11)
            }
            Edge::South | Edge::North => {
                let y = if e == Edge::South { grid.xi2.lo() } else { grid.xi2.hi() };
                (grid.xi1.centers.iter().map(|&x| [x, y]).collect(), |k| k.a22)
            }
        };
        for f in faces {
            let kn = normal(&coef.tensor(f));
            if !tensor_scale(kn, kref) {
                return Err(Error::InvalidGrid(format!(
                    "natural edge at ({}, {}) carries normal coefficient {kn:e}",
                    f[0], f[1]
                )));
            }
        }
    }

    // two-point terms across xi1 faces
    for jj in 1..ny - 1 {
        let j = jj - 1;
        let len = grid.xi2.width(j);
        for ii in 0..nx - 1 {
            let k11 = coef.tensor([grid.xi1.faces[ii], grid.xi2.centers[j]]).a11;
            let dx = layout.x[ii + 1] - layout.x[ii];
            let form = resolve(&layout, &Lin::diff((ii, jj), (ii + 1, jj), 1.0));
            b.product(k11 * len / dx, &form, &form);
        }
    }
    // two-point terms across xi2 faces
    for ii in 1..nx - 1 {
        let i = ii - 1;
        let len = grid.xi1.width(i);
        for jj in 0..ny - 1 {
            let k22 = coef.tensor([grid.xi1.centers[i], grid.xi2.faces[jj]]).a22;
            let dy = layout.y[jj + 1] - layout.y[jj];
            let form = resolve(&layout, &Lin::diff((ii, jj), (ii, jj + 1), 1.0));
            b.product(k22 * len / dy, &form, &form);
        }
    }
    // vertex cross terms 2 K12 gx gy dA; in the boundary row (column) the
    // tangential difference is taken on the interior side only
    if coef.has_cross() {
        for ii in 0..nx - 1 {
            for jj in 0..ny - 1 {
                let (dx, dy) = (layout.x[ii + 1] - layout.x[ii], layout.y[jj + 1] - layout.y[jj]);
                let mid = [0.5 * (layout.x[ii] + layout.x[ii + 1]), 0.5 * (layout.y[jj] + layout.y[jj + 1])];
                let k12 = coef.tensor(mid).a12;
                if k12 == 0.0 {
                    continue;
                }
                let at = [(ii, jj), (ii + 1, jj), (ii, jj + 1), (ii + 1, jj + 1)];
                // weights of the lower and upper pairs in gx
                let (lo, hi) = match (jj == 0, jj == ny - 2) {
                    (true, _) => (0.0, 1.0),
                    (_, true) => (1.0, 0.0),
                    _ => (0.5, 0.5),
                };
                // weights of the left and right pairs in gy
                let (le, ri) = match (ii == 0, ii == nx - 2) {
                    (true, _) => (0.0, 1.0),
                    (_, true) => (1.0, 0.0),
                    _ => (0.5, 0.5),
                };
                let gx = Lin::four(at, [-lo / dx, lo / dx, -hi / dx, hi / dx]);
                let gy = Lin::four(at, [-le / dy, -ri / dy, le / dy, ri / dy]);
                b.product(2.0 * k12 * dx * dy, &resolve(&layout, &gx), &resolve(&layout, &gy));
            }
        }
    }
    // zeroth order, sources and divergence of F
    for i in 0..n1 {
        for j in 0..n2 {
            let p = grid.index(i, j);
            let c = grid.logical_center(i, j);
            let area = grid.xi1.width(i) * grid.xi2.width(j);
            let q = coef.zeroth(c);
            if q < 0.0 || !q.is_finite() {
                return Err(Error::Indefinite { i, j });
            }
            if q != 0.0 {
                b.triplets.push((p, p, q * area));
            }
            if let Some(s) = &problem.source {
                b.rhs[p] -= s(c) * area;
            }
            if let Some(f) = &problem.flux {
                let (w0, w1) = (grid.xi1.faces[i], grid.xi1.faces[i + 1]);
                let (s0, s1) = (grid.xi2.faces[j], grid.xi2.faces[j + 1]);
                let out = (f([w1, c[1]])[0] - f([w0, c[1]])[0]) * grid.xi2.width(j)
                    + (f([c[0], s1])[1] - f([c[0], s0])[1]) * grid.xi1.width(i);
                b.rhs[p] -= out;
            }
        }
    }
    // Neumann loads on auxiliary unknowns
    for e in Edge::ALL {
        let EdgeCondition::Neumann(data) = problem.bcs.get(e) else { continue };
        let along: Vec<(usize, usize, f64, f64)> = match e {
            Edge::West | Edge::East => {
                let ii = if e == Edge::West { 0 } else { nx - 1 };
                (0..n2).map(|j| (ii, j + 1, grid.xi2.faces[j], grid.xi2.faces[j + 1])).collect()
            }
            Edge::South | Edge::North => {
                let jj = if e == Edge::South { 0 } else { ny - 1 };
                (0..n1).map(|i| (i + 1, jj, grid.xi1.faces[i], grid.xi1.faces[i + 1])).collect()
            }
        };
        for (ii, jj, lo, hi) in along {
            let Node::Unknown(u) = layout.node(ii, jj) else { unreachable!("Neumann nodes are unknowns") };
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            let load: f64 = GAUSS3
                .iter()
                .map(|&(g, wt)| {
                    let s = mid + g * half;
                    let pt = match e {
                        Edge::West | Edge::East => [layout.x[ii], s],
                        Edge::South | Edge::North => [s, layout.y[jj]],
                    };
                    wt * data(pt)
                })
                .sum::<f64>()
                * half;
            b.rhs[u] += load;
        }
    }
    let matrix = CsrMatrix::from_triplets(layout.unknowns, layout.unknowns, &b.triplets)?;
    let diag = matrix.diagonal();
    if let Some(row) = diag.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Singular { row });
    }
    Ok(Assembled { matrix, rhs: b.rhs, cells: grid.len(), layout })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub rtol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, max_iter: 50_000, preconditioner: Preconditioner::IncompleteCholesky }
    }
}

/// Nodal values on the padded grid, used for differencing and interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddedField {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub values: Vec<f64>,
}

impl PaddedField {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y.len() + j]
    }

    pub fn contains(&self, xi: [f64; 2]) -> bool {
        let tol = 1e-12 * (1.0 + xi[0].abs().max(xi[1].abs()));
        xi[0] >= self.x[0] - tol
            && xi[0] <= *self.x.last().unwrap() + tol
            && xi[1] >= self.y[0] - tol
            && xi[1] <= *self.y.last().unwrap() + tol
    }

    /// Bilinear interpolation in logical coordinates.
    pub fn interpolate(&self, xi: [f64; 2]) -> Result<f64> {
        if !self.contains(xi) {
            return domain(format!("logical point ({}, {}) outside the grid", xi[0], xi[1]));
        }
        let locate = |axis: &[f64], v: f64| {
            let k = axis.partition_point(|&a| a <= v).clamp(1, axis.len() - 1) - 1;
            let s = ((v - axis[k]) / (axis[k + 1] - axis[k])).clamp(0.0, 1.0);
            (k, s)
        };
        let (i, s) = locate(&self.x, xi[0]);
        let (j, t) = locate(&self.y, xi[1]);
        Ok((1.0 - s) * (1.0 - t) * self.at(i, j)
            + s * (1.0 - t) * self.at(i + 1, j)
            + (1.0 - s) * t * self.at(i, j + 1)
            + s * t * self.at(i + 1, j + 1))
    }
}

/// Physical gradient and modal amplitude at cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub ur: Vec<f64>,
    pub un: Vec<f64>,
    /// `sqrt(u_r^2 + u_n^2 + mu u^2 / r^2)`.
    pub amplitude: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub grid: CurvilinearGrid,
    /// Cell values.
    pub values: Vec<f64>,
    pub padded: PaddedField,
    pub gradient: GradientField,
    pub mu: f64,
    pub report: SolveReport,
}

fn padded_values(layout: &Layout, x: &[f64]) -> PaddedField {
    let (nx, ny) = (layout.nx(), layout.y.len());
    let mut v = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            v[i * ny + j] = match layout.node(i, j) {
                Node::Unknown(u) => x[u],
                Node::Known(c) => c,
                Node::Extrapolated { .. } | Node::Corner => 0.0,
            };
        }
    }
    for i in 0..nx {
        for j in 0..ny {
            if let Node::Extrapolated { at, c } = layout.node(i, j) {
                v[i * ny + j] = c[0] * v[at[0].0 * ny + at[0].1] + c[1] * v[at[1].0 * ny + at[1].1];
            }
        }
    }
    for (i, j) in [(0, 0), (nx - 1, 0), (0, ny - 1), (nx - 1, ny - 1)] {
        if layout.node(i, j) == Node::Corner {
            let [a, b, d] = corner_stencil(layout, i, j);
            v[i * ny + j] = v[a.0 * ny + a.1] + v[b.0 * ny + b.1] - v[d.0 * ny + d.1];
        }
    }
    PaddedField { x: layout.x.clone(), y: layout.y.clone(), values: v }
}

fn three_point_derivative(x: [f64; 3], f: [f64; 3]) -> f64 {
    let (h1, h2) = (x[1] - x[0], x[2] - x[1]);
    -h2 / (h1 * (h1 + h2)) * f[0] + (h2 - h1) / (h1 * h2) * f[1] + h1 / (h2 * (h1 + h2)) * f[2]
}

/// Central differences in logical space mapped to `(u_r, u_n)` through the
/// chart, plus the modal amplitude.
pub fn reconstruct_gradient(grid: &CurvilinearGrid, padded: &PaddedField, mu: f64) -> GradientField {
    let (n1, n2) = (grid.n1(), grid.n2());
    let ny = padded.y.len();
    let mut ur = Vec::with_capacity(n1 * n2);
    let mut un = Vec::with_capacity(n1 * n2);
    let mut amplitude = Vec::with_capacity(n1 * n2);
    for i in 1..=n1 {
        for j in 1..=n2 {
            let g1 = three_point_derivative(
                [padded.x[i - 1], padded.x[i], padded.x[i + 1]],
                [padded.values[(i - 1) * ny + j], padded.values[i * ny + j], padded.values[(i + 1) * ny + j]],
            );
            let g2 = three_point_derivative(
                [padded.y[j - 1], padded.y[j], padded.y[j + 1]],
                [padded.values[i * ny + j - 1], padded.values[i * ny + j], padded.values[i * ny + j + 1]],
            );
            let xi = [padded.x[i], padded.y[j]];
            let jac = grid.chart.jacobian(xi);
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let r_ = (jac[1][1] * g1 - jac[1][0] * g2) / det;
            let n_ = (-jac[0][1] * g1 + jac[0][0] * g2) / det;
            let u = padded.values[i * ny + j];
            let r = grid.centers[grid.index(i - 1, j - 1)][0];
            let modal = if r > 0.0 { mu * u * u / (r * r) } else { 0.0 };
            ur.push(r_);
            un.push(n_);
            amplitude.push((r_ * r_ + n_ * n_ + modal).sqrt());
        }
    }
    GradientField { ur, un, amplitude }
}

/// Assembles and solves: PCG when the matrix is symmetric, BiCGSTAB
/// otherwise.
pub fn solve(problem: &DiscreteProblem<'_>, opts: &SolveOptions) -> Result<FieldSolution> {
    solve_with_guess(problem, opts, None)
}

/// [`solve`] with an initial guess for the cell unknowns.
pub fn solve_with_guess(problem: &DiscreteProblem<'_>, opts: &SolveOptions, guess: Option<&[f64]>) -> Result<FieldSolution> {
    let sys = assemble(problem)?;
    let x0 = guess.map(|g| {
        let mut x = vec![0.0; sys.unknowns()];
        x[..g.len().min(sys.cells)].copy_from_slice(&g[..g.len().min(sys.cells)]);
        x
    });
    // symmetric Jacobi equilibration; tolerances refer to the scaled system
    let scale: Vec<f64> = sys.matrix.diagonal().iter().map(|d| 1.0 / d.sqrt()).collect();
    let matrix = sys.matrix.scaled_symmetric(&scale)?;
    let rhs: Vec<f64> = sys.rhs.iter().zip(&scale).map(|(b, s)| b * s).collect();
    let y0 = x0.map(|x| x.iter().zip(&scale).map(|(v, s)| v / s).collect::<Vec<f64>>());
    let (asym, _, _) = matrix.asymmetry();
    let (y, report) = if asym <= 1e-12 {
        pcg_solve_from(&matrix, &rhs, y0.as_deref(), opts.rtol, opts.max_iter, opts.preconditioner, false)?
    } else {
        bicgstab_solve(&matrix, &rhs, opts.rtol, opts.max_iter, opts.preconditioner)?
    };
    let x: Vec<f64> = y.iter().zip(&scale).map(|(v, s)| v * s).collect();
    let padded = padded_values(&sys.layout, &x);
    let gradient = reconstruct_gradient(problem.grid, &padded, problem.mu);
    Ok(FieldSolution {
        grid: problem.grid.clone(),
        values: x[..sys.cells].to_vec(),
        padded,
        gradient,
        mu: problem.mu,
        report,
    })
}

impl FieldSolution {
    /// Largest modal amplitude over cells whose centre satisfies `region`,
    /// with the centre where it is attained.
    pub fn sup_amplitude(&self, region: impl Fn([f64; 2]) -> bool) -> Result<(f64, [f64; 2])> {
        let mut best: Option<(f64, [f64; 2])> = None;
        for (k, c) in self.grid.centers.iter().enumerate() {
            if region(*c) {
                let a = self.gradient.amplitude[k];
                if best.is_none_or(|(b, _)| a > b) {
                    best = Some((a, *c));
                }
            }
        }
        best.ok_or_else(|| Error::Domain("no cell centre lies in the requested region".into()))
    }

    pub fn interpolate_physical(&self, x: [f64; 2]) -> Result<f64> {
        let xi = self.grid.chart.logical(x)?;
        self.padded.interpolate(xi)
    }

    /// CSV with columns `i,j,r,xn,u,ur,un,amplitude`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        use crate::geometry::fmt12;
        writeln!(out, "i,j,r,xn,u,ur,un,amplitude")?;
        for i in 0..self.grid.n1() {
            for j in 0..self.grid.n2() {
                let k = self.grid.index(i, j);
                let [r, xn] = self.grid.centers[k];
                writeln!(
                    out,
                    "{i},{j},{},{},{},{},{},{}",
                    fmt12(r),
                    fmt12(xn),
                    fmt12(self.values[k]),
                    fmt12(self.gradient.ur[k]),
                    fmt12(self.gradient.un[k]),
                    fmt12(self.gradient.amplitude[k])
                )?;
            }
        }
        Ok(())
    }
}

/// Number of midpoint samples across the gap.
pub const GAP_SAMPLES: usize = 64;

/// Average of the field across the gap fibre at radius `r_query`.
pub fn gap_average(sol: &FieldSolution, r_query: f64, eps: f64, shape: &InclusionShape) -> Result<f64> {
    if !(r_query > 0.0 && r_query < shape.r0) {
        return domain(format!("query radius {r_query} outside (0, {})", shape.r0));
    }
    let (top, bottom) = shape.gap_bounds(r_query, eps);
    let h = (top - bottom) / GAP_SAMPLES as f64;
    let mut acc = 0.0;
    for s in 0..GAP_SAMPLES {
        let xn = bottom + (s as f64 + 0.5) * h;
        let xi = sol.grid.chart.logical([r_query, xn])?;
        if !sol.padded.contains(xi) {
            return domain(format!("gap segment at r = {r_query} leaves the grid at x_n = {xn}"));
        }
        acc += sol.padded.interpolate(xi)?;
    }
    Ok(acc / GAP_SAMPLES as f64)
}

/// Grid for the two-sphere benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereGridSpec {
    pub n_sigma: usize,
    pub n_tau: usize,
    pub grading: Grading,
}

/// Default clustering factor for [`SphereGridSpec::clustered`].
pub const SPHERE_CLUSTERING: f64 = 10.0;

impl SphereGridSpec {
    /// Exponential clustering toward `sigma = 0` with contrast
    /// `clustering * pi / sqrt(eps)`. The sphere faces that meet the gap
    /// occupy `sigma` up to about `sqrt(eps)`.
    pub fn clustered(n_sigma: usize, n_tau: usize, eps: f64, clustering: f64) -> Self {
        let contrast = (clustering * std::f64::consts::PI / eps.sqrt()).max(1.0);
        Self { n_sigma, n_tau, grading: Grading::exponential(contrast, Ends::Low) }
    }
}

#[derive(Debug, Clone)]
pub struct SphereSolution {
    pub n: u32,
    pub eps: f64,
    pub map: BipolarMap,
    /// `u_hat = w + r`.
    pub field: FieldSolution,
    /// `w = u_hat - r` at cell centres.
    pub w: Vec<f64>,
    /// `min w / max |w|`.
    pub w_min_relative: f64,
}

/// Relative lower tolerance on `w = u_hat - r`.
pub const SUBSOLUTION_TOL: f64 = 1e-8;

impl SphereSolution {
    pub fn subsolution_holds(&self) -> bool {
        self.w_min_relative >= -SUBSOLUTION_TOL
    }
}

fn sphere_problem<'a>(map: BipolarMap, n: Dimension, grid: &'a CurvilinearGrid, coef: &'a CoefficientField) -> DiscreteProblem<'a> {
    let flux = move |xi: [f64; 2]| map.sphere_flux_density(xi[0], n);
    let bcs = BoundarySpec {
        west: EdgeCondition::dirichlet_const(0.0),
        east: EdgeCondition::dirichlet_const(0.0),
        south: EdgeCondition::Neumann(Box::new(flux)),
        north: EdgeCondition::Neumann(Box::new(flux)),
    };
    let mut p = DiscreteProblem::new(grid, coef, bcs);
    p.mu = coef.mu;
    p
}

/// First-harmonic problem outside two unit spheres at distance `eps`,
/// solved for `w = u_hat - r` on the bipolar rectangle.
pub fn solve_reduced_sphere_problem(n: Dimension, eps: f64, spec: &SphereGridSpec, opts: &SolveOptions) -> Result<SphereSolution> {
    solve_reduced_sphere_problem_from(n, eps, spec, opts, None)
}

/// As [`solve_reduced_sphere_problem`], warm-started from a coarser solution.
pub fn solve_reduced_sphere_problem_from(
    n: Dimension,
    eps: f64,
    spec: &SphereGridSpec,
    opts: &SolveOptions,
    coarse: Option<&SphereSolution>,
) -> Result<SphereSolution> {
    if !(eps > 0.0 && eps < 0.25) {
        return domain(format!("eps must lie in (0, 1/4), got {eps}"));
    }
    if spec.n_tau % 2 != 0 {
        return domain("n_tau must be even so that no cell centre sits at infinity");
    }
    let map = BipolarMap::new(eps)?;
    let grid = build_bipolar_grid(map, spec.n_sigma, spec.n_tau, spec.grading)?;
    let coef = CoefficientField::modal(&grid, n, 1);
    let problem = sphere_problem(map, n, &grid, &coef);
    let guess = match coarse {
        Some(c) => Some(prolong_w(c, &grid)?),
        None => None,
    };
    let sol = solve_with_guess(&problem, opts, guess.as_deref())?;
    let w = sol.values.clone();
    let wmax = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let wmin = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let w_min_relative = if wmax > 0.0 { wmin / wmax } else { 0.0 };

    // shift to u_hat = w + r, including the padded ring
    let mut field = sol;
    for (v, c) in field.values.iter_mut().zip(&grid.centers) {
        *v += c[0];
    }
    let ny = field.padded.y.len();
    for i in 0..field.padded.x.len() {
        for j in 0..ny {
            let r = match map.forward(field.padded.x[i], field.padded.y[j]) {
                BipolarImage::Point { r, .. } => r,
                BipolarImage::Infinity => 0.0,
            };
            field.padded.values[i * ny + j] += r;
        }
    }
    field.gradient = reconstruct_gradient(&grid, &field.padded, coef.mu);
    if !field.report.converged {
        return Err(Error::Invariant(format!(
            "sphere solve did not converge: {} iterations, residual {:e}",
            field.report.iterations, field.report.relative_residual
        )));
    }
    Ok(SphereSolution { n: n.get(), eps, map, field, w, w_min_relative })
}

fn prolong_w(coarse: &SphereSolution, fine: &CurvilinearGrid) -> Result<Vec<f64>> {
    let f = &coarse.field;
    let mut out = Vec::with_capacity(fine.len());
    for i in 0..fine.n1() {
        for j in 0..fine.n2() {
            let xi = fine.logical_center(i, j);
            let r = fine.centers[fine.index(i, j)][0];
            out.push(f.padded.interpolate(xi)? - r);
        }
    }
    Ok(out)
}

/// Exact solution for manufactured tests, in physical coordinates.
pub struct Manufactured {
    pub value: ScalarFn<'static>,
    /// `(u_r, u_n)`.
    pub gradient: VectorFn<'static>,
    /// Physical `div(r^(n-2) grad u) - q u` (or the operator matching the
    /// supplied coefficients) per unit meridian area.
    pub operator: ScalarFn<'static>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Dirichlet,
    Neumann,
    NaturalDegenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    /// Volume-weighted RMS error.
    pub l2_errors: Vec<f64>,
    pub max_errors: Vec<f64>,
    /// Observed orders between successive sizes (L2).
    pub orders: Vec<f64>,
}

impl ConvergenceReport {
    pub fn min_order(&self) -> f64 {
        self.orders.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Outward conormal flux `K grad_xi u . n` per unit logical length.
fn exact_conormal(coef: &dyn Coefficients, chart: &Chart, exact: &Manufactured, xi: [f64; 2], e: Edge) -> f64 {
    let x = chart.physical(xi).expect("finite boundary point");
    let g = (exact.gradient)(x);
    let j = chart.jacobian(xi);
    // grad_xi u = J^T grad_x u
    let g1 = j[0][0] * g[0] + j[1][0] * g[1];
    let g2 = j[0][1] * g[0] + j[1][1] * g[1];
    let k = coef.tensor(xi);
    let (f1, f2) = (k.a11 * g1 + k.a12 * g2, k.a12 * g1 + k.a22 * g2);
    match e {
        Edge::West => -f1,
        Edge::East => f1,
        Edge::South => -f2,
        Edge::North => f2,
    }
}

/// Solves the manufactured problem on `build(N)` for each `N` and reports
/// errors and observed orders (with respect to `N`).
pub fn manufactured_convergence(
    build: &dyn Fn(usize) -> Result<(CurvilinearGrid, Box<dyn Coefficients>)>,
    exact: &Manufactured,
    edges: [EdgeKind; 4],
    sizes: &[usize],
    opts: &SolveOptions,
) -> Result<ConvergenceReport> {
    if sizes.len() < 2 {
        return domain("need at least two grid sizes");
    }
    let mut l2_errors = Vec::new();
    let mut max_errors = Vec::new();
    for &nsize in sizes {
        let (grid, coef) = build(nsize)?;
        let chart = grid.chart;
        let make = |k: EdgeKind, e: Edge| -> EdgeCondition {
            let coef_ref: &dyn Coefficients = coef.as_ref();
            match k {
                EdgeKind::Dirichlet => {
                    let v = &exact.value;
                    EdgeCondition::Dirichlet(Box::new(move |xi| v(chart.physical(xi).expect("finite boundary point"))))
                }
                EdgeKind::Neumann => {
                    EdgeCondition::Neumann(Box::new(move |xi| exact_conormal(coef_ref, &chart, exact, xi, e)))
                }
                EdgeKind::NaturalDegenerate => EdgeCondition::NaturalDegenerate,
            }
        };
        let bcs = BoundarySpec {
            west: make(edges[0], Edge::West),
            east: make(edges[1], Edge::East),
            south: make(edges[2], Edge::South),
            north: make(edges[3], Edge::North),
        };
        let mut problem = DiscreteProblem::new(&grid, coef.as_ref(), bcs);
        let op = &exact.operator;
        let c: &dyn Coefficients = coef.as_ref();
        problem.source = Some(Box::new(move |xi| op(chart.physical(xi).expect("finite point")) * c.logical_density(xi)));
        let sol = solve(&problem, opts)?;
        if !sol.report.converged {
            return Err(Error::Invariant(format!("manufactured solve at N = {nsize} did not converge")));
        }
        let (mut num, mut den, mut emax) = (0.0, 0.0, 0.0f64);
        for (k, c) in grid.centers.iter().enumerate() {
            let e = sol.values[k] - (exact.value)(*c);
            num += e * e * grid.volumes[k];
            den += grid.volumes[k];
            emax = emax.max(e.abs());
        }
        l2_errors.push((num / den).sqrt());
        max_errors.push(emax);
    }
    let orders = (1..sizes.len())
        .map(|k| (l2_errors[k - 1] / l2_errors[k]).ln() / (sizes[k] as f64 / sizes[k - 1] as f64).ln())
        .collect();
    Ok(ConvergenceReport { sizes: sizes.to_vec(), l2_errors, max_errors, orders })
}
