use super::Real;

/// `c (m×n) = op(a) · op(b) + beta · c` on contiguous row-major buffers.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and the three slices cannot alias
    // because `c` is borrowed mutably.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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
