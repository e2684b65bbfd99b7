//! Slice-level numeric kernels shared by the tape and plain tensor ops.

const MR: usize = 4;
const NR: usize = 8;

/// `out[n×m] += a[n×k] · b[k×m]`
///
/// Register-blocked over `MR × NR` output tiles. Every output element is
/// still accumulated in increasing `p` order, so results do not depend on
/// the blocking.
pub(crate) fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && out.len() >= n * m);
    let mut i = 0;
    while i + MR <= n {
        let mut j = 0;
        while j + NR <= m {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * m + j..(i + r) * m + j + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * m + j..p * m + j + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * m + j..(i + r) * m + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < m {
            for r in i..i + MR {
                gemm_row(&a[r * k..(r + 1) * k], b, m, j, &mut out[r * m..(r + 1) * m]);
            }
        }
        i += MR;
    }
    for r in i..n {
        gemm_row(&a[r * k..(r + 1) * k], b, m, 0, &mut out[r * m..(r + 1) * m]);
    }
}

/// One output row, columns `from..m`.
fn gemm_row(a_row: &[f64], b: &[f64], m: usize, from: usize, out_row: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * m + from..(p + 1) * m];
        for (o, &bv) in out_row[from..].iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(a, &transpose(&b[..m * k], m, k), n, k, m, out);
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(&transpose(&a[..n * k], n, k), b, k, n, m, out);
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-max stabilized softmax of `row / tau`, in place.
pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Multi-head scaled dot-product attention over `n` positions of width `d`.
/// Returns the concatenated head outputs and the attention weights
/// (`heads × n × n`).
pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut p[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row, 1.0);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &w) in row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_gemm() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3×2
        let mut ab = vec![0.0; 4];
        gemm(&a, &b, 2, 3, 2, &mut ab);
        assert_eq!(ab, vec![-1.0, 7.5, -1.0, 18.0]);

        // bᵀ stored row-major is 2×3
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        let mut ab2 = vec![0.0; 4];
        gemm_nt(&a, &bt, 2, 3, 2, &mut ab2);
        assert_eq!(ab, ab2);

        // aᵀ·c where a is 2×3, c is 2×2
        let c = [1.0, 0.0, 0.0, 1.0];
        let mut atc = vec![0.0; 6];
        gemm_tn(&a, &c, 2, 3, 2, &mut atc);
        assert_eq!(atc, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
