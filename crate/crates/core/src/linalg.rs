//! Small deterministic sparse linear algebra.
//!
//! CSR storage, a Thomas tridiagonal solver, and preconditioned CG /
//! BiCGSTAB. All reductions run serially in index order, so repeated solves
//! of the same system are bitwise identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed in
    /// input order and explicit zeros are kept.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::DimensionMismatch { expected: nrows.max(ncols), got: r.max(c) });
            }
        }
        // stable sort keeps the summation order of duplicates fixed
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &t in &order {
            let (r, c, v) = triplets[t];
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self { nrows, ncols, indptr, indices, values })
    }

    /// `diag(s) A diag(s)`.
    pub fn scaled_symmetric(&self, s: &[f64]) -> Result<Self> {
        if s.len() != self.nrows || self.nrows != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: s.len() });
        }
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] *= s[r] * s[self.indices[k]];
            }
        }
        Ok(out)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`, each row summed left to right.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.ncols, got: x.len() });
        }
        let mut y = vec![0.0; self.nrows];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    fn spmv_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *out = acc;
        }
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`, with its
    /// location.
    pub fn asymmetry(&self) -> (f64, usize, usize) {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst = (0.0, 0, 0);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                let gap = (v - self.get(c, r)).abs() / scale;
                if gap > worst.0 {
                    worst = (gap, r, c);
                }
            }
        }
        worst
    }

    pub fn check_symmetric(&self, tol: f64) -> Result<()> {
        if self.nrows != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: self.ncols });
        }
        let (gap, row, col) = self.asymmetry();
        if gap > tol {
            return Err(Error::NotSymmetric { row, col, gap });
        }
        Ok(())
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }
}

/// Dense Gaussian elimination with partial pivoting. Reference solver for
/// tests and tiny systems.
pub fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.len() });
    }
    let mut m = a.to_dense();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[piv][col] == 0.0 {
            return Err(Error::Singular { row: col });
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Tridiagonal matrix; `sub[i]` couples row `i+1` to column `i`, `sup[i]`
/// couples row `i` to column `i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn new(sub: Vec<f64>, main: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        let m = main.len();
        if m == 0 || sub.len() + 1 != m || sup.len() + 1 != m {
            return Err(Error::DimensionMismatch { expected: m.saturating_sub(1), got: sub.len().max(sup.len()) });
        }
        Ok(Self { sub, main, sup })
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.len();
        (0..m)
            .map(|i| {
                let mut acc = self.main[i] * x[i];
                if i > 0 {
                    acc += self.sub[i - 1] * x[i - 1];
                }
                if i + 1 < m {
                    acc += self.sup[i] * x[i + 1];
                }
                acc
            })
            .collect()
    }

    /// Weak row diagonal dominance `|main| >= |sub| + |sup|` in every row.
    pub fn is_diagonally_dominant(&self) -> bool {
        let m = self.len();
        (0..m).all(|i| {
            let off = if i > 0 { self.sub[i - 1].abs() } else { 0.0 }
                + if i + 1 < m { self.sup[i].abs() } else { 0.0 };
            self.main[i].abs() >= off * (1.0 - 1e-14)
        })
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let m = self.len();
        let mut t = Vec::with_capacity(3 * m);
        for i in 0..m {
            if i > 0 {
                t.push((i, i - 1, self.sub[i - 1]));
            }
            t.push((i, i, self.main[i]));
            if i + 1 < m {
                t.push((i, i + 1, self.sup[i]));
            }
        }
        CsrMatrix::from_triplets(m, m, &t).expect("indices in range")
    }
}

/// Thomas algorithm (no pivoting).
pub fn thomas_solve(t: &Tridiagonal, rhs: &[f64]) -> Result<Vec<f64>> {
    let m = t.len();
    if rhs.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: rhs.len() });
    }
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = t.main[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Singular { row: 0 });
    }
    if m > 1 {
        c[0] = t.sup[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..m {
        denom = t.main[i] - t.sub[i - 1] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Singular { row: i });
        }
        if i + 1 < m {
            c[i] = t.sup[i] / denom;
        }
        d[i] = (rhs[i] - t.sub[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..m - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
    Ssor { omega: f64 },
    /// Zero fill-in incomplete Cholesky, shifted when a pivot breaks down.
    IncompleteCholesky,
}

impl Preconditioner {
    pub const DEFAULT_SSOR_OMEGA: f64 = 1.5;

    pub fn ssor() -> Self {
        Self::Ssor { omega: Self::DEFAULT_SSOR_OMEGA }
    }

    pub fn name(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Jacobi => "jacobi".into(),
            Self::Ssor { omega } => format!("ssor({omega})"),
            Self::IncompleteCholesky => "ic0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    pub solver: String,
    pub preconditioner: String,
}

/// Lower triangle `L` with `L L^T ~ A` on the pattern of `A`.
struct IcFactor {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl IcFactor {
    fn new(a: &CsrMatrix) -> Result<Self> {
        let mut shift = 0.0;
        for _ in 0..12 {
            if let Some(f) = Self::try_factor(a, shift) {
                return Ok(f);
            }
            shift = if shift == 0.0 { 1e-4 } else { shift * 4.0 };
        }
        Err(Error::IllConditioned("incomplete Cholesky broke down for every shift".into()))
    }

    fn try_factor(a: &CsrMatrix, shift: f64) -> Option<Self> {
        let n = a.nrows;
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        indptr.push(0);
        for i in 0..n {
            let start = indices.len();
            for k in a.indptr[i]..a.indptr[i + 1] {
                let j = a.indices[k];
                if j > i {
                    break;
                }
                indices.push(j);
                values.push(a.values[k]);
            }
            let end = indices.len();
            if end == start || indices[end - 1] != i {
                return None;
            }
            values[end - 1] *= 1.0 + shift;
            for p in start..end {
                let j = indices[p];
                if j == i {
                    let acc: f64 = values[start..p].iter().map(|v| v * v).sum();
                    let d = values[p] - acc;
                    if !(d > 0.0) || !d.is_finite() {
                        return None;
                    }
                    values[p] = d.sqrt();
                    continue;
                }
                // sparse dot of rows i and j of L over columns < j
                let (mut q, qend) = (indptr[j], indptr[j + 1] - 1);
                let mut acc = 0.0;
                for m in start..p {
                    let c = indices[m];
                    while q < qend && indices[q] < c {
                        q += 1;
                    }
                    if q < qend && indices[q] == c {
                        acc += values[m] * values[q];
                    }
                }
                values[p] = (values[p] - acc) / values[indptr[j + 1] - 1];
            }
            indptr.push(end);
        }
        Some(Self { indptr, indices, values })
    }

    fn solve(&self, r: &[f64], z: &mut [f64]) {
        let n = self.indptr.len() - 1;
        for i in 0..n {
            let (s, e) = (self.indptr[i], self.indptr[i + 1] - 1);
            let mut acc = r[i];
            for k in s..e {
                acc -= self.values[k] * z[self.indices[k]];
            }
            z[i] = acc / self.values[e];
        }
        for i in (0..n).rev() {
            let (s, e) = (self.indptr[i], self.indptr[i + 1] - 1);
            z[i] /= self.values[e];
            let zi = z[i];
            for k in s..e {
                z[self.indices[k]] -= self.values[k] * zi;
            }
        }
    }
}

/// Applies `z = M^{-1} r`.
struct PrecondApply<'a> {
    a: &'a CsrMatrix,
    kind: Preconditioner,
    diag: Vec<f64>,
    diag_pos: Vec<usize>,
    ic: Option<IcFactor>,
}

impl<'a> PrecondApply<'a> {
    fn new(a: &'a CsrMatrix, kind: Preconditioner) -> Result<Self> {
        let diag = a.diagonal();
        if !matches!(kind, Preconditioner::None) {
            if let Some(row) = diag.iter().position(|d| *d == 0.0 || !d.is_finite()) {
                return Err(Error::Singular { row });
            }
        }
        let diag_pos = (0..a.nrows)
            .map(|r| {
                let span = a.indptr[r]..a.indptr[r + 1];
                span.start + a.indices[span.clone()].binary_search(&r).unwrap_or(0)
            })
            .collect();
        let ic = match kind {
            Preconditioner::IncompleteCholesky => Some(IcFactor::new(a)?),
            _ => None,
        };
        Ok(Self { a, kind, diag, diag_pos, ic })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self.kind {
            Preconditioner::None => z.copy_from_slice(r),
            Preconditioner::Jacobi => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.diag) {
                    *zi = ri / di;
                }
            }
            Preconditioner::IncompleteCholesky => self.ic.as_ref().expect("factor built").solve(r, z),
            Preconditioner::Ssor { omega } => {
                let a = self.a;
                let n = a.nrows;
                // (D + wL) y = w(2-w) r
                let scale = omega * (2.0 - omega);
                for i in 0..n {
                    let mut acc = scale * r[i];
                    for k in a.indptr[i]..self.diag_pos[i] {
                        acc -= omega * a.values[k] * z[a.indices[k]];
                    }
                    z[i] = acc / self.diag[i];
                }
                // y <- D y, then (D + wU) z = y
                for i in 0..n {
                    z[i] *= self.diag[i];
                }
                for i in (0..n).rev() {
                    let mut acc = z[i];
                    for k in self.diag_pos[i] + 1..a.indptr[i + 1] {
                        acc -= omega * a.values[k] * z[a.indices[k]];
                    }
                    z[i] = acc / self.diag[i];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `||b - A x|| / ||b||` recomputed from scratch.
pub fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; a.nrows];
    a.spmv_into(x, &mut ax);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let bn = norm(b);
    if bn == 0.0 {
        norm(&r)
    } else {
        norm(&r) / bn
    }
}

fn check_square(a: &CsrMatrix, rhs: &[f64], tol: f64) -> Result<()> {
    if a.nrows != a.ncols {
        return Err(Error::DimensionMismatch { expected: a.nrows, got: a.ncols });
    }
    if rhs.len() != a.nrows {
        return Err(Error::DimensionMismatch { expected: a.nrows, got: rhs.len() });
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Preconditioned conjugate gradients from a zero initial guess.
///
/// `A` must be symmetric; this is checked to 1e-12 relative when
/// `check_symmetry` is set. Running out of iterations is reported, not
/// raised.
pub fn pcg_solve(
    a: &CsrMatrix,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
    precond: Preconditioner,
    check_symmetry: bool,
) -> Result<(Vec<f64>, SolveReport)> {
    pcg_solve_from(a, rhs, None, tol, max_iter, precond, check_symmetry)
}

/// [`pcg_solve`] starting from `guess` instead of zero.
pub fn pcg_solve_from(
    a: &CsrMatrix,
    rhs: &[f64],
    guess: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
    precond: Preconditioner,
    check_symmetry: bool,
) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, rhs, tol)?;
    if check_symmetry {
        a.check_symmetric(1e-12)?;
    }
    let n = a.nrows;
    let m = PrecondApply::new(a, precond)?;
    let mut x = match guess {
        Some(g) if g.len() == n => g.to_vec(),
        Some(g) => return Err(Error::DimensionMismatch { expected: n, got: g.len() }),
        None => vec![0.0; n],
    };
    let mut r = rhs.to_vec();
    if guess.is_some() {
        let mut ax = vec![0.0; n];
        a.spmv_into(&x, &mut ax);
        for (ri, ai) in r.iter_mut().zip(&ax) {
            *ri -= ai;
        }
    }
    let bnorm = norm(rhs);
    let report = |iterations, x: &[f64]| {
        let rel = relative_residual(a, x, rhs);
        SolveReport {
            iterations,
            relative_residual: rel,
            converged: rel <= tol,
            solver: "pcg".into(),
            preconditioner: precond.name(),
        }
    };
    if bnorm == 0.0 {
        let zero = vec![0.0; n];
        return Ok((zero.clone(), report(0, &zero)));
    }
    if norm(&r) <= tol * bnorm {
        return Ok((x.clone(), report(0, &x)));
    }
    let mut z = vec![0.0; n];
    m.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut it = 0;
    let mut replacements = 0;
    while it < max_iter {
        a.spmv_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        it += 1;
        if norm(&r) <= 0.5 * tol * bnorm {
            // confirm against the true residual before stopping
            if relative_residual(a, &x, rhs) <= tol {
                break;
            }
            if replacements == MAX_RESIDUAL_REPLACEMENTS {
                break;
            }
            // the recurrence drifted; restart from the true residual
            replacements += 1;
            a.spmv_into(&x, &mut ap);
            for i in 0..n {
                r[i] = rhs[i] - ap[i];
            }
            m.apply(&r, &mut z);
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            continue;
        }
        m.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rep = report(it, &x);
    Ok((x, rep))
}

/// Restarts allowed when the recursive residual converges but the true one
/// has not.
const MAX_RESIDUAL_REPLACEMENTS: usize = 20;

/// Right-preconditioned BiCGSTAB from a zero initial guess.
pub fn bicgstab_solve(
    a: &CsrMatrix,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
    precond: Preconditioner,
) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, rhs, tol)?;
    let n = a.nrows;
    let m = PrecondApply::new(a, precond)?;
    let mut x = vec![0.0; n];
    let bnorm = norm(rhs);
    let report = |iterations, x: &[f64]| {
        let rel = relative_residual(a, x, rhs);
        SolveReport {
            iterations,
            relative_residual: rel,
            converged: rel <= tol,
            solver: "bicgstab".into(),
            preconditioner: precond.name(),
        }
    };
    if bnorm == 0.0 {
        return Ok((x.clone(), report(0, &x)));
    }
    let mut r = rhs.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut it = 0;
    while it < max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        m.apply(&p, &mut y);
        a.spmv_into(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            break;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        it += 1;
        if norm(&s) <= 0.5 * tol * bnorm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            if relative_residual(a, &x, rhs) <= tol {
                r.copy_from_slice(&s);
                break;
            }
            for i in 0..n {
                x[i] -= alpha * y[i];
            }
        }
        m.apply(&s, &mut zs);
        a.spmv_into(&zs, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zs[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= 0.5 * tol * bnorm && relative_residual(a, &x, rhs) <= tol {
            break;
        }
    }
    let rep = report(it, &x);
    Ok((x, rep))
}
