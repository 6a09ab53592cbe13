//! Blocked dense kernels on top of nalgebra's gemm. nalgebra's own Cholesky
//! inverse and `tr_mul` are unblocked, which is too slow for the basis sizes
//! used at `L = 129`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const BLOCK: usize = 128;

/// `a^T a`.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    tr_mul(a, a)
}

/// `a^T b` through matrixmultiply, reading `a` with swapped strides.
pub fn tr_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "tr_mul inner dimensions");
    let (m, k, n) = (a.ncols(), a.nrows(), b.ncols());
    let mut c = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: all three buffers are column-major with the stated extents and
    // `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

/// Right-looking blocked Cholesky. On success the lower triangle of `g` holds
/// `L` with `g = L L^T`; the strict upper triangle is zeroed.
pub fn cholesky_in_place(g: &mut DMatrix<f64>) -> Result<()> {
    let n = g.nrows();
    if n != g.ncols() {
        return Err(Error::Numerical("Cholesky of a non-square matrix".into()));
    }
    let mut kb = 0;
    while kb < n {
        let b = BLOCK.min(n - kb);
        // diagonal block
        for j in kb..kb + b {
            let mut d = g[(j, j)];
            for p in kb..j {
                d -= g[(j, p)] * g[(j, p)];
            }
            if !(d > 0.0) {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {j})"
                )));
            }
            let l = d.sqrt();
            g[(j, j)] = l;
            for i in j + 1..kb + b {
                let mut v = g[(i, j)];
                for p in kb..j {
                    v -= g[(i, p)] * g[(j, p)];
                }
                g[(i, j)] = v / l;
            }
        }
        let rest = n - kb - b;
        if rest > 0 {
            // panel: L21 = A21 L11^{-T}, computed as L11 X = A21^T
            let l11 = g.view((kb, kb), (b, b)).clone_owned();
            let mut panel_t = g.view((kb + b, kb), (rest, b)).transpose();
            if !l11.solve_lower_triangular_mut(&mut panel_t) {
                return Err(Error::Numerical("singular Cholesky block".into()));
            }
            let l21 = panel_t.transpose();
            g.view_mut((kb + b, kb), (rest, b)).copy_from(&l21);
            let mut a22 = g.view_mut((kb + b, kb + b), (rest, rest));
            a22.gemm(-1.0, &l21, &panel_t, 1.0);
        }
        kb += b;
    }
    for j in 1..n {
        for i in 0..j {
            g[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L L^T x = b` in place for many right-hand sides, given the factor
/// from [`cholesky_in_place`].
pub fn cholesky_solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Result<()> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: b.nrows(),
        });
    }
    let cols = b.ncols();
    // forward: L z = b
    let mut kb = 0;
    while kb < n {
        let nb = BLOCK.min(n - kb);
        let lkk = l.view((kb, kb), (nb, nb)).clone_owned();
        let mut zk = b.view((kb, 0), (nb, cols)).clone_owned();
        if !lkk.solve_lower_triangular_mut(&mut zk) {
            return Err(Error::Numerical("singular triangular block".into()));
        }
        b.view_mut((kb, 0), (nb, cols)).copy_from(&zk);
        let rest = n - kb - nb;
        if rest > 0 {
            let lbelow = l.view((kb + nb, kb), (rest, nb)).clone_owned();
            b.view_mut((kb + nb, 0), (rest, cols))
                .gemm(-1.0, &lbelow, &zk, 1.0);
        }
        kb += nb;
    }
    // backward: L^T x = z
    let mut end = n;
    while end > 0 {
        let nb = BLOCK.min(end);
        let kb = end - nb;
        let lkk = l.view((kb, kb), (nb, nb)).clone_owned();
        let mut xk = b.view((kb, 0), (nb, cols)).clone_owned();
        if !lkk.tr_solve_lower_triangular_mut(&mut xk) {
            return Err(Error::Numerical("singular triangular block".into()));
        }
        b.view_mut((kb, 0), (nb, cols)).copy_from(&xk);
        if kb > 0 {
            let lrow_t = l.view((kb, 0), (nb, kb)).transpose();
            b.view_mut((0, 0), (kb, cols)).gemm(-1.0, &lrow_t, &xk, 1.0);
        }
        end = kb;
    }
    Ok(())
}
