//! Small dense linear algebra: one-sided Jacobi SVD and minimum-norm
//! least squares. Matrices are row-major `&[f64]` with explicit dims —
//! everything here is desk-scale (hundreds of rows at most).

use crate::error::{Error, Result};

/// Row-major matrix product `a (m×k) · b (k×n)`.
pub fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    c
}

pub fn matvec(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m];
    for i in 0..m {
        y[i] = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
    y
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Economy SVD of a tall matrix (m >= n) by one-sided Jacobi rotations:
/// returns (u: m×n, sigma: n, v: n×n) with a = u · diag(sigma) · vᵀ and
/// sigma descending.
fn svd_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    debug_assert!(m >= n);
    let mut u = a.to_vec(); // columns rotated in place
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let col_dot = |u: &[f64], p: usize, q: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..m {
            s += u[r * n + p] * u[r * n + q];
        }
        s
    };

    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut converged = true;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = col_dot(&u, p, p);
                let aqq = col_dot(&u, q, q);
                let apq = col_dot(&u, p, q);
                if apq.abs() <= tol * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let up = u[r * n + p];
                    let uq = u[r * n + q];
                    u[r * n + p] = c * up - s * uq;
                    u[r * n + q] = s * up + c * uq;
                }
                for r in 0..n {
                    let vp = v[r * n + p];
                    let vq = v[r * n + q];
                    v[r * n + p] = c * vp - s * vq;
                    v[r * n + q] = s * vp + c * vq;
                }
            }
        }
        if converged {
            break;
        }
    }

    let mut sigma = vec![0.0; n];
    for j in 0..n {
        let norm = (0..m).map(|r| u[r * n + j] * u[r * n + j]).sum::<f64>().sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            for r in 0..m {
                u[r * n + j] /= norm;
            }
        }
    }

    // Sort singular values descending, permuting u and v columns.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut us = vec![0.0; m * n];
    let mut vs = vec![0.0; n * n];
    let mut ss = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        ss[dst] = sigma[src];
        for r in 0..m {
            us[r * n + dst] = u[r * n + src];
        }
        for r in 0..n {
            vs[r * n + dst] = v[r * n + src];
        }
    }
    (us, ss, vs)
}

/// SVD-backed least-squares solver, factored once and reusable across many
/// right-hand sides (the per-pixel decode solves share one coefficient
/// matrix).
pub struct LeastSquares {
    m: usize,
    n: usize,
    /// Left singular vectors as m×r
    u: Vec<f64>,
    sigma: Vec<f64>,
    /// Right singular vectors as n×r
    v: Vec<f64>,
    rank: usize,
}

impl LeastSquares {
    pub fn new(a: &[f64], m: usize, n: usize) -> Result<Self> {
        if a.len() != m * n || m == 0 || n == 0 {
            return Err(Error::InvalidShape {
                op: "least_squares",
                shape: vec![m, n],
                reason: format!("matrix buffer has {} entries", a.len()),
            });
        }
        let (u, sigma, v) = if m >= n {
            svd_tall(a, m, n)
        } else {
            // a = (u' s v'ᵀ)ᵀ of the transpose: swap roles of u and v.
            let at = transpose(a, m, n);
            let (ut, s, vt) = svd_tall(&at, n, m);
            (vt, s, ut)
        };
        let smax = sigma.first().copied().unwrap_or(0.0);
        let cutoff = smax * (m.max(n) as f64) * f64::EPSILON;
        let rank = sigma.iter().take_while(|&&s| s > cutoff && s > 0.0).count();
        Ok(LeastSquares {
            m,
            n,
            u,
            sigma,
            v,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// True when the system cannot pin every unknown.
    pub fn underdetermined(&self) -> bool {
        self.rank < self.n
    }

    /// Ratio of largest to smallest retained singular value.
    pub fn condition(&self) -> f64 {
        if self.rank == 0 {
            f64::INFINITY
        } else {
            self.sigma[0] / self.sigma[self.rank - 1]
        }
    }

    /// Minimum-norm least-squares solution of `a·x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.m {
            return Err(Error::InvalidShape {
                op: "least_squares::solve",
                shape: vec![b.len()],
                reason: format!("rhs must have {} entries", self.m),
            });
        }
        let r = self.sigma.len();
        let mut coeff = vec![0.0; r];
        for j in 0..self.rank {
            let mut s = 0.0;
            for i in 0..self.m {
                s += self.u[i * r + j] * b[i];
            }
            coeff[j] = s / self.sigma[j];
        }
        let mut x = vec![0.0; self.n];
        for i in 0..self.n {
            let mut s = 0.0;
            for j in 0..self.rank {
                s += self.v[i * r + j] * coeff[j];
            }
            x[i] = s;
        }
        Ok(x)
    }

    /// L2 norm of `a·x − b` for a candidate solution.
    pub fn residual_norm(&self, a: &[f64], x: &[f64], b: &[f64]) -> f64 {
        let ax = matvec(a, x, self.m, self.n);
        ax.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<f64> {
        (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn svd_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n) in &[(5, 3), (3, 5), (4, 4), (8, 2)] {
            let a = random_matrix(&mut rng, m, n);
            let ls = LeastSquares::new(&a, m, n).unwrap();
            let r = ls.sigma.len();
            // rebuild u * diag(sigma) * v^T
            let mut us = ls.u.clone();
            for i in 0..m {
                for j in 0..r {
                    us[i * r + j] *= ls.sigma[j];
                }
            }
            let vt = transpose(&ls.v, ls.n, r);
            let rec = matmul_plain(&us, &vt, m, r, n);
            for (x, y) in rec.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-10, "reconstruction off: {} vs {}", x, y);
            }
        }
    }

    #[test]
    fn solve_matches_normal_equations_on_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, n) = (9, 4);
        let a = random_matrix(&mut rng, m, n);
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls = LeastSquares::new(&a, m, n).unwrap();
        let x = ls.solve(&b).unwrap();

        // Independent route: solve AᵀA x = Aᵀ b by Gaussian elimination.
        let at = transpose(&a, m, n);
        let ata = matmul_plain(&at, &a, n, m, n);
        let atb = matvec(&at, &b, n, m);
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = ata[i * n..(i + 1) * n].to_vec();
                row.push(atb[i]);
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap()).unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for j in col..=n {
                aug[col][j] /= d;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[i][col];
                    for j in col..=n {
                        aug[i][j] -= f * aug[col][j];
                    }
                }
            }
        }
        for i in 0..n {
            assert!((x[i] - aug[i][n]).abs() < 1e-8, "component {} mismatch", i);
        }
    }

    #[test]
    fn min_norm_on_underdetermined() {
        // x + y = 2 has min-norm solution (1, 1).
        let ls = LeastSquares::new(&[1.0, 1.0], 1, 2).unwrap();
        assert!(ls.underdetermined());
        let x = ls.solve(&[2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_square_system() {
        let a = [2.0, 1.0, -1.0, 3.0];
        let ls = LeastSquares::new(&a, 2, 2).unwrap();
        let x = ls.solve(&[5.0, 4.0]).unwrap();
        assert!((2.0 * x[0] + x[1] - 5.0).abs() < 1e-12);
        assert!((-x[0] + 3.0 * x[1] - 4.0).abs() < 1e-12);
    }
}
