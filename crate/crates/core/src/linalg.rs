//! Row-major dense matrix helpers over `matrixmultiply`.

/// `c = a · bᵀ (+ c if accumulate)` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn matmul_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe row-major
    // `a` (m×k), `b` read as its transpose (k×n) and `c` (m×n).
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b (+ c)` with `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked; all three operands row-major.
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
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b (+ c)` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn matmul_at(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked; `a` is read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_naive_loops() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 2x3 (as n×k) or 3x2
        let mut c = [0.0; 4];
        matmul_bt(&a, &b, &mut c, 2, 3, 2, false);
        assert_eq!(c, [50.0, 68.0, 122.0, 167.0]);

        let mut d = [0.0; 4];
        matmul(&a, &b, &mut d, 2, 3, 2, false);
        assert_eq!(d, [58.0, 64.0, 139.0, 154.0]);

        // aᵀ b with a: 2x3, b: 2x3 -> 3x3
        let mut e = [0.0; 9];
        matmul_at(&a, &b, &mut e, 2, 3, 3, false);
        assert_eq!(e[0], 1.0 * 7.0 + 4.0 * 10.0);
        assert_eq!(e[4], 2.0 * 8.0 + 5.0 * 11.0);
        matmul_at(&a, &b, &mut e, 2, 3, 3, true);
        assert_eq!(e[8], 2.0 * (3.0 * 9.0 + 6.0 * 12.0));
    }
}
