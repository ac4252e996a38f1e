/// Row/column strides of a dense matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stride {
    row: isize,
    col: isize,
}

impl Stride {
    /// Plain row-major storage with `cols` columns.
    pub(crate) fn row_major(cols: usize) -> Self {
        Stride {
            row: cols as isize,
            col: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub(crate) fn col_major(cols: usize) -> Self {
        Stride {
            row: 1,
            col: cols as isize,
        }
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Stride, b: &[f64], sb: Stride, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches given the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
