//! Dense matrix kernels. All matrices are row-major slices.

/// Runs `$body` compiled with AVX2 when the CPU supports it. Mul and add
/// stay separate instructions, so both paths round identically.
macro_rules! dispatch {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(gemm, gemm_body, (a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize));
dispatch!(gemm_at_b, gemm_at_b_body, (a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize));

/// `out[n×m] += a[n×k] · b[k×m]`
#[inline(always)]
fn gemm_body(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let k4 = k - k % 4;
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        // four rows of `b` per pass keep the output row in registers longer;
        // the left-to-right sum matches the one-row-at-a-time order
        for p in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * m..(p + 1) * m];
            let b1 = &b[(p + 1) * m..(p + 2) * m];
            let b2 = &b[(p + 2) * m..(p + 3) * m];
            let b3 = &b[(p + 3) * m..(p + 4) * m];
            axpy4(out_row, [a0, a1, a2, a3], [b0, b1, b2, b3]);
        }
        for p in k4..k {
            let a_ip = a_row[p];
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

#[inline(always)]
fn axpy4(out: &mut [f64], a: [f64; 4], b: [&[f64]; 4]) {
    let iter = out.iter_mut().zip(b[0]).zip(b[1]).zip(b[2]).zip(b[3]);
    for ((((o, x0), x1), x2), x3) in iter {
        *o = *o + a[0] * x0 + a[1] * x1 + a[2] * x2 + a[3] * x3;
    }
}

/// `out[k×m] += aᵀ · b` where `a` is `n×k` and `b` is `n×m`.
#[inline(always)]
fn gemm_at_b_body(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let n4 = n - n % 4;
    for i in (0..n4).step_by(4) {
        let b0 = &b[i * m..(i + 1) * m];
        let b1 = &b[(i + 1) * m..(i + 2) * m];
        let b2 = &b[(i + 2) * m..(i + 3) * m];
        let b3 = &b[(i + 3) * m..(i + 4) * m];
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let out_row = &mut out[p * m..(p + 1) * m];
            axpy4(out_row, [a0, a1, a2, a3], [b0, b1, b2, b3]);
        }
    }
    for i in n4..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

/// `out[n×k] += a · bᵀ` where `a` is `n×m` and `b` is `k×m`.
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    let mut bt = vec![0.0; m * k];
    transpose(b, &mut bt, k, m);
    gemm(a, &bt, out, n, m, k);
}

pub(crate) fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] · [5; 6] = [17; 39]
        let mut out = vec![0.0; 2];
        gemm(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], &mut out, 2, 2, 1);
        assert_eq!(out, vec![17.0, 39.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 3.0, 2.0]; // 2x3
        let mut bt = vec![0.0; 6];
        transpose(&b, &mut bt, 2, 3);
        let mut direct = vec![0.0; 4];
        gemm(&a, &bt, &mut direct, 2, 3, 2);
        let mut fused = vec![0.0; 4];
        gemm_a_bt(&a, &b, &mut fused, 2, 3, 2);
        assert_eq!(direct, fused);

        let mut at = vec![0.0; 6];
        transpose(&a, &mut at, 2, 3);
        let mut direct = vec![0.0; 9];
        gemm(&at, &b, &mut direct, 3, 2, 3);
        let mut fused = vec![0.0; 9];
        gemm_at_b(&a, &b, &mut fused, 2, 3, 3);
        assert_eq!(direct, fused);
    }
}
