/// Strided view of a row-major operand: element `[i, j]` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c[m, n] = a[m, k] · b[k, n]`, or `c += ...` when `accumulate` is set.
/// `c` is contiguous row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], accumulate: bool) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last_a = (m - 1) * a.rs + (k - 1) * a.cs;
        let last_b = (k - 1) * b.rs + (n - 1) * b.cs;
        assert!(last_a < a.data.len() && last_b < b.data.len());
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches in a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
