use rayon::prelude::*;

use super::tensor::Element;

/// Row-block size for parallel GEMM. Fixed (not derived from the thread
/// count) so results are identical on any machine.
const ROW_BLOCK: usize = 128;

/// `c = a @ b` for row-major `a` (m x k), `b` (k x n), `c` (m x n).
///
/// Large products are split over row blocks; every output element is still
/// produced by a single GEMM call over the full k range, so the reduction
/// order is fixed.
pub(crate) fn matmul_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::ZERO);
        return;
    }
    if m * n * k < 32_768 || m <= ROW_BLOCK {
        unsafe {
            T::gemm(m, k, n, T::ONE, a.as_ptr(), b.as_ptr(), T::ZERO, c.as_mut_ptr());
        }
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .zip(a.par_chunks(ROW_BLOCK * k))
        .for_each(|(c_block, a_block)| {
            let rows = a_block.len() / k;
            unsafe {
                T::gemm(
                    rows,
                    k,
                    n,
                    T::ONE,
                    a_block.as_ptr(),
                    b.as_ptr(),
                    T::ZERO,
                    c_block.as_mut_ptr(),
                );
            }
        });
}

/// `c += a^T @ b` for row-major `a` (m x k), `b` (m x n), `c` (k x n).
///
/// Used by backward passes that reduce over the row dimension (e.g. weight
/// gradients). Single GEMM call: the reduction over m must stay in one
/// fixed order, so this one is not row-split.
pub(crate) fn matmul_at_b_accumulate<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        // a^T is a with swapped strides.
        gemm_strided(
            k,
            m,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::ONE,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

/// `c = a @ b^T` for row-major `a` (m x k), `b` (n x k), `c` (m x n).
pub(crate) fn matmul_a_bt_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::ZERO);
        return;
    }
    let block_work = |c_block: &mut [T], a_block: &[T]| {
        let rows = a_block.len() / k;
        unsafe {
            gemm_strided(
                rows,
                k,
                n,
                T::ONE,
                a_block.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                T::ZERO,
                c_block.as_mut_ptr(),
                n as isize,
            );
        }
    };
    if m * n * k < 32_768 || m <= ROW_BLOCK {
        block_work(c, a);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .zip(a.par_chunks(ROW_BLOCK * k))
        .for_each(|(c_block, a_block)| block_work(c_block, a_block));
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
) {
    // Dispatch through a tiny shim so Element stays object-simple.
    trait Gemm: Sized {
        #[allow(clippy::too_many_arguments)]
        unsafe fn run(
            m: usize,
            k: usize,
            n: usize,
            alpha: Self,
            a: *const Self,
            rsa: isize,
            csa: isize,
            b: *const Self,
            rsb: isize,
            csb: isize,
            beta: Self,
            c: *mut Self,
            rsc: isize,
        );
    }
    macro_rules! impl_gemm {
        ($t:ty, $f:path) => {
            impl Gemm for $t {
                unsafe fn run(
                    m: usize,
                    k: usize,
                    n: usize,
                    alpha: Self,
                    a: *const Self,
                    rsa: isize,
                    csa: isize,
                    b: *const Self,
                    rsb: isize,
                    csb: isize,
                    beta: Self,
                    c: *mut Self,
                    rsc: isize,
                ) {
                    $f(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
                }
            }
        };
    }
    impl_gemm!(f32, matrixmultiply::sgemm);
    impl_gemm!(f64, matrixmultiply::dgemm);

    // Safety: Element is only implemented for f32/f64, matching the shims.
    use std::any::TypeId;
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        f32::run(
            m,
            k,
            n,
            *(&alpha as *const T as *const f32),
            a as *const f32,
            rsa,
            csa,
            b as *const f32,
            rsb,
            csb,
            *(&beta as *const T as *const f32),
            c as *mut f32,
            rsc,
        );
    } else {
        f64::run(
            m,
            k,
            n,
            *(&alpha as *const T as *const f64),
            a as *const f64,
            rsa,
            csa,
            b as *const f64,
            rsb,
            csb,
            *(&beta as *const T as *const f64),
            c as *mut f64,
            rsc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_into(m, k, n, &a, &b, &mut c);
        let expect = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn a_bt_matches_naive() {
        let (m, k, n) = (6, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.2).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.3).cos()).collect();
        // b[p][j] = bt[j][p]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_a_bt_into(m, k, n, &a, &bt, &mut c);
        let expect = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn at_b_accumulates() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64) * 0.5).collect();
        let mut c = vec![1.0; k * n];
        matmul_at_b_accumulate(m, k, n, &a, &b, &mut c);
        // at[p][i] = a[i][p]
        let mut expect = vec![1.0; k * n];
        for p in 0..k {
            for j in 0..n {
                for i in 0..m {
                    expect[p * n + j] += a[i * k + p] * b[i * n + j];
                }
            }
        }
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn large_split_matches_single_call() {
        let (m, k, n) = (700, 33, 17);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32) * 0.01).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 13 % 97) as f32) * 0.02).collect();
        let mut c = vec![0.0f32; m * n];
        matmul_into(m, k, n, &a, &b, &mut c);
        let mut c1 = vec![0.0f32; m * n];
        unsafe {
            f32::gemm(m, k, n, 1.0, a.as_ptr(), b.as_ptr(), 0.0, c1.as_mut_ptr());
        }
        assert_eq!(c, c1);
    }
}
