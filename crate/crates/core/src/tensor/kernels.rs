//! Plain loops over row-major slices. Accumulation order is fixed per output
//! element, so a row's result never depends on which other rows share the call.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// `grad_a[m×k] += grad_out[m×n] · bᵀ`.
pub fn matmul_grad_a<T: Real>(grad_out: &[T], b: &[T], grad_a: &mut [T], k: usize, n: usize) {
    let m = grad_a.len() / k.max(1);
    gemm_acc(grad_out, &transpose(b, k, n), grad_a, m, n, k);
}

/// `grad_b[k×n] += aᵀ · grad_out[m×n]`.
pub fn matmul_grad_b<T: Real>(a: &[T], grad_out: &[T], grad_b: &mut [T], k: usize, n: usize) {
    let m = a.len() / k.max(1);
    gemm_acc(&transpose(a, m, k), grad_out, grad_b, k, m, n);
}

/// `[r×c]ᵀ`.
pub fn transpose<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Every output element is `out + a[i,0]·b[0,j] + a[i,1]·b[1,j] + …`, summed
/// in that order whatever tile it lands in, so results are bit-identical
/// across batch sizes and instruction sets.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_avx2(a, b, out, m, k, n) };
        return;
    }
    gemm_portable(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_portable(a, b, out, m, k, n);
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

#[inline(always)]
fn gemm_portable<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full_rows = m - m % TILE_ROWS;
    let full_cols = n - n % TILE_COLS;
    let mut strip = vec![T::zero(); k * TILE_COLS];
    for j0 in (0..full_cols).step_by(TILE_COLS) {
        // Column strip of b, contiguous so the inner loop streams through it.
        for (p, dst) in strip.chunks_exact_mut(TILE_COLS).enumerate() {
            dst.copy_from_slice(&b[p * n + j0..p * n + j0 + TILE_COLS]);
        }
        for i0 in (0..full_rows).step_by(TILE_ROWS) {
            let rows: [&[T]; TILE_ROWS] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS]);
            }
            for (p, bp) in strip.chunks_exact(TILE_COLS).enumerate() {
                let bp: &[T; TILE_COLS] = bp.try_into().expect("tile width");
                for (row, a_row) in acc.iter_mut().zip(&rows) {
                    let av = a_row[p];
                    for (o, &bv) in row.iter_mut().zip(bp) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
    }
    for r in 0..full_rows {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, full_cols);
    }
    for r in full_rows..m {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, 0);
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn gemm_row<T: Real>(a_row: &[T], b: &[T], out_row: &mut [T], n: usize, from: usize) {
    if from == n {
        return;
    }
    for (p, &av) in a_row.iter().enumerate() {
        axpy(av, &b[p * n + from..(p + 1) * n], &mut out_row[from..]);
    }
}

/// `y += alpha · x`.
#[inline(always)]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] += xs[i] * ys[i];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log Σ exp(xs)` with max subtraction; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Sequential-order reference for `out += a·b`.
    fn naive_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = out[i * n + j];
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
    }

    #[test]
    fn tiled_gemm_is_bit_identical_to_sequential_sums() {
        for (m, k, n) in [(1, 1, 1), (4, 3, 16), (9, 7, 37), (33, 20, 50), (5, 0, 18)] {
            let a = random(m * k, 1);
            let b = random(k * n, 2);
            let mut fast = random(m * n, 3);
            let mut slow = fast.clone();
            gemm_acc(&a, &b, &mut fast, m, k, n);
            naive_acc(&a, &b, &mut slow, m, k, n);
            assert_eq!(fast, slow, "{m}×{k}×{n}");
        }
    }

    #[test]
    fn rows_do_not_depend_on_neighbours() {
        let (m, k, n) = (13, 11, 40);
        let a = random(m * k, 4);
        let b = random(k * n, 5);
        let full = matmul(&a, &b, m, k, n);
        for r in 0..m {
            assert_eq!(matmul(&a[r * k..(r + 1) * k], &b, 1, k, n), full[r * n..(r + 1) * n]);
        }
    }

    #[test]
    fn gradient_kernels_match_loops() {
        let (m, k, n) = (6, 5, 19);
        let a = random(m * k, 6);
        let b = random(k * n, 7);
        let g = random(m * n, 8);
        let mut ga = vec![0.0f32; m * k];
        let mut gb = vec![0.0f32; k * n];
        matmul_grad_a(&g, &b, &mut ga, k, n);
        matmul_grad_b(&a, &g, &mut gb, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f32 = (0..n).map(|j| g[i * n + j] * b[p * n + j]).sum();
                assert!((ga[i * k + p] - want).abs() < 1e-5);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let want: f32 = (0..m).map(|i| a[i * k + p] * g[i * n + j]).sum();
                assert!((gb[p * n + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let x: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let y = vec![1.0; 19];
        assert_eq!(dot(&x, &y), 171.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.5f64, -1.0, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }
}
