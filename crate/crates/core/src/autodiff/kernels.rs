//! Dense matrix-product kernels shared by forward and backward rules.

/// Operand layout: `false` means stored as written (`m x k` for the left
/// operand), `true` means stored transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = strides(m, k, a_transposed);
    let (rsb, csb) = strides(k, n, b_transposed);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the row/column strides derived from the same dimensions.
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

/// Same contract as [`gemm`], with a fixed left-to-right summation order over
/// the inner dimension. Used for the many tiny per-sequence attention products.
#[allow(clippy::too_many_arguments)]
pub(crate) fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    let (rsa, csa) = strides(m, k, a_transposed);
    let (rsb, csb) = strides(k, n, b_transposed);
    let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            if csb == 1 {
                let brow = &b[p * rsb..p * rsb + n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}
