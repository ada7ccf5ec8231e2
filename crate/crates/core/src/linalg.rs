//! Thin safe wrapper around the dgemm kernel plus small dense helpers.

/// `c = alpha * a@b + beta * c` for row-major views described by
/// (row-stride, col-stride) pairs. `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
///
/// Strides let callers multiply by transposed views without copying.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(max_offset(m, k, rsa, csa) < a.len());
    debug_assert!(max_offset(k, n, rsb, csb) < b.len());
    debug_assert!(max_offset(m, n, rsc, csc) < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    let r = (rows as isize - 1) * rs;
    let c = (cols as isize - 1) * cs;
    debug_assert!(r >= 0 && c >= 0, "negative strides are not used here");
    (r + c) as usize
}

/// Contiguous row-major strides for an `_ x cols` matrix.
pub fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

/// Strides viewing a row-major `rows x cols` matrix as its transpose.
pub fn transposed(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matmul() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, row_major(3), &b, row_major(2), 0.0, &mut c, row_major(2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_view() {
        // a: 2x3 row-major; a^T is 3x2. Compute a^T @ a (3x3).
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, transposed(3), &a, row_major(3), 0.0, &mut c, row_major(3));
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 0.0, 0.0, 2.0];
        let mut c = [1.0, 1.0, 1.0, 1.0];
        gemm(2, 2, 2, 1.0, &a, row_major(2), &b, row_major(2), 1.0, &mut c, row_major(2));
        assert_eq!(c, [3.0, 1.0, 1.0, 3.0]);
    }
}
