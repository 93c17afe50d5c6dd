use super::Scalar;
use crate::par;

/// Output rows per task. Fixed so that results never depend on thread count.
const ROW_CHUNK: usize = 128;

/// Row-major operand view: `trans == false` means the logical matrix is
/// stored as written, `true` means storage holds its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a, T> {
    pub data: &'a [T],
    pub trans: bool,
}

/// `c (m×n) = a (m×k) @ b (k×n) + beta * c`.
pub(crate) fn matmul_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.data.len(), m * k);
    debug_assert_eq!(b.data.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    let kernel = |chunk_idx: usize, out: &mut [T]| {
        let r0 = chunk_idx * ROW_CHUNK;
        let rows = out.len() / n;
        let a_off = if a.trans { r0 } else { r0 * k };
        // SAFETY: offsets and strides stay inside `a`, `b` and `out`, whose
        // lengths were checked against m, k, n above.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.data.as_ptr().add(a_off),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < 1 << 16 || m <= ROW_CHUNK {
        kernel(0, c);
    } else {
        par::for_each_chunk_mut(c, ROW_CHUNK * n, kernel);
    }
}
