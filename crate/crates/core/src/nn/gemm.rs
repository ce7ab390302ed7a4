/// Row/column strides of a dense matrix view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major storage with `cols` elements per row.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` elements per row.
    pub fn col_major(rows_of_storage: usize) -> Self {
        Self {
            rs: 1,
            cs: rows_of_storage as isize,
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |l: Layout, r: usize, cl: usize| -> usize {
        if r == 0 || cl == 0 {
            0
        } else {
            ((r - 1) as isize * l.rs + (cl - 1) as isize * l.cs) as usize + 1
        }
    };
    assert!(a.len() >= extent(la, m, k), "gemm: lhs too short");
    assert!(b.len() >= extent(lb, k, n), "gemm: rhs too short");
    assert!(c.len() >= extent(lc, m, n), "gemm: output too short");
    // SAFETY: extents checked above; strides are non-negative and the output
    // view never aliases the inputs (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}
