/// `c = a · b (+ c if accumulate)` for row-major `c` of shape `m × n`.
///
/// `a` is logically `m × k`; when `a_t` is set it is stored as `k × m`.
/// `b` is logically `k × n`; when `b_t` is set it is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above guarantee every strided access made by
    // dgemm for the given m, k, n and strides stays inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A matrix view into a slice: element `(i, j)` lives at `off + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a · b (+ c if accumulate)` over arbitrary strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: Strided,
    b: &[f64],
    bv: Strided,
    c: &mut [f64],
    cv: Strided,
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        assert!(accumulate || k != 0, "gemm_strided: empty inner dimension without accumulate");
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm_strided: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm_strided: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm_strided: output view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the view bounds were checked above for the full m × k, k × n and
    // m × n index ranges, and all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
