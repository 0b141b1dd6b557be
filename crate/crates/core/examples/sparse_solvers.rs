//! Compares CG preconditioners and BiCGSTAB on a 2D Poisson matrix.

use gaplab::linalg::{bicgstab_solve, pcg_solve, CsrMatrix, Preconditioner};

fn poisson(m: usize) -> CsrMatrix {
    let idx = |i: usize, j: usize| i * m + j;
    let mut t = Vec::new();
    for i in 0..m {
        for j in 0..m {
            t.push((idx(i, j), idx(i, j), 4.0));
            if i > 0 {
                t.push((idx(i, j), idx(i - 1, j), -1.0));
            }
            if i + 1 < m {
                t.push((idx(i, j), idx(i + 1, j), -1.0));
            }
            if j > 0 {
                t.push((idx(i, j), idx(i, j - 1), -1.0));
            }
            if j + 1 < m {
                t.push((idx(i, j), idx(i, j + 1), -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(m * m, m * m, &t).expect("valid triplets")
}

fn main() -> gaplab::Result<()> {
    let a = poisson(100);
    let b = vec![1.0; a.nrows()];
    for p in [Preconditioner::None, Preconditioner::Jacobi, Preconditioner::Ssor { omega: 1.5 }, Preconditioner::IncompleteCholesky] {
        let (_, rep) = pcg_solve(&a, &b, 1e-10, 10_000, p, true)?;
        println!("pcg/{:<6} {:>5} iterations, residual {:.2e}", rep.preconditioner, rep.iterations, rep.relative_residual);
    }
    let (_, rep) = bicgstab_solve(&a, &b, 1e-10, 10_000, Preconditioner::IncompleteCholesky)?;
    println!("bicgstab/{:<3} {:>5} iterations, residual {:.2e}", rep.preconditioner, rep.iterations, rep.relative_residual);
    Ok(())
}
