//! Dense symmetric eigendecomposition (cyclic Jacobi).
//!
//! Chosen for determinism and simplicity over speed; the matrices here are
//! at most a few thousand square.

/// Off-diagonal Frobenius norm threshold at which sweeps stop.
const OFF_DIAG_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix given as a row-major `n`×`n`
/// slice. Returns `(eigenvalues, eigenvectors)` sorted by descending
/// eigenvalue; `eigenvectors[k]` is the unit eigenvector for
/// `eigenvalues[k]`, sign-fixed so its largest-magnitude component is
/// positive.
pub(crate) fn eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    // v is column-major accumulation of rotations: v[i*n + k] = V_{ik}
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * off).sqrt() < OFF_DIAG_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        a[y * n + y]
            .partial_cmp(&a[x * n + x])
            .unwrap()
            .then(x.cmp(&y))
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        values.push(a[k * n + k]);
        let mut vec_k: Vec<f64> = (0..n).map(|i| v[i * n + k]).collect();
        // canonical sign: largest-magnitude component positive
        let mut lead = 0usize;
        for (i, x) in vec_k.iter().enumerate() {
            if x.abs() > vec_k[lead].abs() {
                lead = i;
            }
        }
        if vec_k[lead] < 0.0 {
            for x in &mut vec_k {
                *x = -*x;
            }
        }
        vectors.push(vec_k);
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonalizes_a_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let (vals, vecs) = eigh(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((vals[0] - 3.0).abs() < 1e-10);
        assert!((vals[1] - 1.0).abs() < 1e-10);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((vecs[0][0] - inv_sqrt2).abs() < 1e-10);
        assert!((vecs[0][1] - inv_sqrt2).abs() < 1e-10);
    }

    #[test]
    fn reconstructs_random_symmetric_matrices() {
        let n = 12;
        let mut m = vec![0.0; n * n];
        let mut state = 0x8badf00du64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let (vals, vecs) = eigh(&m, n);
        // A v = lambda v for each pair
        for (lambda, vec) in vals.iter().zip(&vecs) {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| m[i * n + j] * vec[j]).sum();
                assert!((av - lambda * vec[i]).abs() < 1e-8);
            }
        }
        // eigenvalues sorted descending
        for w in vals.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }
}
