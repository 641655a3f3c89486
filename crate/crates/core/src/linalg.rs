//! Small dense linear algebra on stack buffers.
//!
//! Chart dimension is capped at [`MAX_DIM`], so every per-node matrix fits in a
//! fixed array and the hot loops never allocate. Symmetric matrices are stored
//! packed, upper triangle, row by row.

use num_traits::Float;

/// Largest supported chart dimension.
pub const MAX_DIM: usize = 4;
/// Largest ambient dimension (`MAX_DIM + 1`).
pub const MAX_AMBIENT: usize = MAX_DIM + 1;
/// Packed length of a symmetric `MAX_DIM` x `MAX_DIM` matrix.
pub const MAX_SYM: usize = MAX_DIM * (MAX_DIM + 1) / 2;

/// Number of independent entries of a symmetric `n` x `n` matrix.
#[inline]
pub const fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of entry `(i, j)`; symmetric in its arguments.
#[inline]
pub const fn sym_idx(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Expand a packed symmetric matrix into a dense row-major `n` x `n` buffer.
pub fn sym_unpack(n: usize, packed: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = packed[sym_idx(n, i, j)];
        }
    }
}

/// Pack the symmetric part of a dense row-major matrix.
pub fn sym_pack(n: usize, dense: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in i..n {
            out[sym_idx(n, i, j)] = 0.5 * (dense[i * n + j] + dense[j * n + i]);
        }
    }
}

/// Eigen-decomposition of a packed symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order; column `k` of `vecs` (row-major,
/// `n` x `n`) is the eigenvector of `vals[k]`.
pub fn sym_eigen(n: usize, packed: &[f64]) -> ([f64; MAX_DIM], [f64; MAX_DIM * MAX_DIM]) {
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    sym_unpack(n, packed, &mut a);
    let mut v = [0.0; MAX_DIM * MAX_DIM];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += a[i * n + i] * a[i * n + i];
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= 1e-32 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2, 3];
    let mut vals = [0.0; MAX_DIM];
    for i in 0..n {
        vals[i] = a[i * n + i];
    }
    order[..n].sort_by(|&x, &y| vals[x].partial_cmp(&vals[y]).unwrap_or(core::cmp::Ordering::Equal));
    let mut sorted = [0.0; MAX_DIM];
    let mut vecs = [0.0; MAX_DIM * MAX_DIM];
    for (k, &src) in order[..n].iter().enumerate() {
        sorted[k] = vals[src];
        for i in 0..n {
            vecs[i * n + k] = v[i * n + src];
        }
    }
    (sorted, vecs)
}

/// Smallest and largest eigenvalue of a packed symmetric matrix.
pub fn sym_extreme_eigenvalues(n: usize, packed: &[f64]) -> (f64, f64) {
    if n == 2 {
        let (a, b, c) = (packed[0], packed[1], packed[2]);
        let m = 0.5 * (a + c);
        let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return (m - r, m + r);
    }
    let (vals, _) = sym_eigen(n, packed);
    (vals[0], vals[n - 1])
}

/// Operator norm of a packed symmetric matrix.
pub fn sym_op_norm(n: usize, packed: &[f64]) -> f64 {
    let (lo, hi) = sym_extreme_eigenvalues(n, packed);
    lo.abs().max(hi.abs())
}

/// Trace of a packed symmetric matrix.
pub fn sym_trace(n: usize, packed: &[f64]) -> f64 {
    (0..n).map(|i| packed[sym_idx(n, i, i)]).sum()
}

/// Frobenius norm of a packed symmetric matrix.
pub fn sym_frobenius(n: usize, packed: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in i..n {
            let v = packed[sym_idx(n, i, j)];
            s += if i == j { v * v } else { 2.0 * v * v };
        }
    }
    s.sqrt()
}

/// Solve `a x = b` in place by Gaussian elimination with partial pivoting.
///
/// `a` is row-major `m` x `m` and is destroyed; the solution overwrites `b`.
/// Returns `false` when a pivot vanishes.
pub fn solve_in_place(m: usize, a: &mut [f64], b: &mut [f64]) -> bool {
    for col in 0..m {
        let mut piv = col;
        for r in (col + 1)..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if a[piv * m + col] == 0.0 {
            return false;
        }
        if piv != col {
            for k in 0..m {
                a.swap(col * m + k, piv * m + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * m + col];
        for r in (col + 1)..m {
            let f = a[r * m + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..m {
                a[r * m + k] -= f * a[col * m + k];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..m).rev() {
        let mut s = b[col];
        for k in (col + 1)..m {
            s -= a[col * m + k] * b[k];
        }
        b[col] = s / a[col * m + col];
    }
    true
}

/// Determinant of a row-major `m` x `m` matrix (`m <= MAX_AMBIENT`).
pub fn det(m: usize, src: &[f64]) -> f64 {
    let mut a = [0.0; MAX_AMBIENT * MAX_AMBIENT];
    a[..m * m].copy_from_slice(&src[..m * m]);
    let mut d = 1.0;
    for col in 0..m {
        let mut piv = col;
        for r in (col + 1)..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if a[piv * m + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..m {
                a.swap(col * m + k, piv * m + k);
            }
            d = -d;
        }
        let p = a[col * m + col];
        d *= p;
        for r in (col + 1)..m {
            let f = a[r * m + col] / p;
            for k in col..m {
                a[r * m + k] -= f * a[col * m + k];
            }
        }
    }
    d
}

/// `JᵀJ` for a row-major `rows` x `n` matrix, packed.
pub fn gram(rows: usize, n: usize, j: &[f64], out: &mut [f64]) {
    for a in 0..n {
        for b in a..n {
            let mut s = 0.0;
            for r in 0..rows {
                s += j[r * n + a] * j[r * n + b];
            }
            out[sym_idx(n, a, b)] = s;
        }
    }
}

/// Symmetric square root of a packed positive semidefinite matrix, dense output.
pub fn sym_sqrt(n: usize, packed: &[f64], out: &mut [f64]) {
    let (vals, vecs) = sym_eigen(n, packed);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs[i * n + k] * vals[k].max(0.0).sqrt() * vecs[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
}

/// Symmetric inverse square root of a packed positive definite matrix, dense output.
pub fn sym_inv_sqrt(n: usize, packed: &[f64], out: &mut [f64]) {
    let (vals, vecs) = sym_eigen(n, packed);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs[i * n + k] * vecs[j * n + k] / vals[k].sqrt();
            }
            out[i * n + j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_index_is_symmetric_and_dense() {
        let n = 3;
        let mut seen = [false; 6];
        for i in 0..n {
            for j in 0..n {
                assert_eq!(sym_idx(n, i, j), sym_idx(n, j, i));
                seen[sym_idx(n, i, j)] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(sym_idx(3, 0, 0), 0);
        assert_eq!(sym_idx(3, 1, 1), 3);
        assert_eq!(sym_idx(3, 2, 2), 5);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // [[2,1,0],[1,2,0],[0,0,5]] has eigenvalues 1, 3, 5.
        let p = [2.0, 1.0, 0.0, 2.0, 0.0, 5.0];
        let (vals, _) = sym_eigen(3, &p);
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
        assert!((vals[2] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn solve_and_det_agree() {
        let mut a = [4.0, 1.0, 2.0, 3.0];
        let mut b = [1.0, 2.0];
        assert!(solve_in_place(2, &mut a, &mut b));
        assert!((4.0 * b[0] + b[1] - 1.0).abs() < 1e-15);
        assert!((2.0 * b[0] + 3.0 * b[1] - 2.0).abs() < 1e-15);
        assert!((det(2, &[4.0, 1.0, 2.0, 3.0]) - 10.0).abs() < 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let p = [2.0, 0.5, 1.0];
        let mut r = [0.0; 4];
        sym_sqrt(2, &p, &mut r);
        let m00 = r[0] * r[0] + r[1] * r[2];
        let m01 = r[0] * r[1] + r[1] * r[3];
        let m11 = r[2] * r[1] + r[3] * r[3];
        assert!((m00 - 2.0).abs() < 1e-14 && (m01 - 0.5).abs() < 1e-14 && (m11 - 1.0).abs() < 1e-14);
    }
}
