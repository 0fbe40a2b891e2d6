use super::Matrix;
use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`svd_small`].
pub const SVD_LIMIT: usize = 4096;

const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `W = U diag(sigma) Vt`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows x k` with orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative, length `k = min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// `k x cols` with orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let (m, n) = (self.u.rows(), self.vt.cols());
        Matrix::from_fn(m, n, |i, j| {
            (0..k).map(|t| self.u.get(i, t) * self.sigma[t] * self.vt.get(t, j)).sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD on the smaller Gram side.
pub fn svd_small(w: &Matrix) -> Result<Svd> {
    let (m, n) = w.shape();
    if m.min(n) > SVD_LIMIT {
        return Err(Error::TooLarge {
            rows: m,
            cols: n,
            limit: SVD_LIMIT,
        });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m >= n {
        let (u, sigma, v) = jacobi_columns(w);
        Ok(Svd { u, sigma, vt: v.transpose() })
    } else {
        let (u, sigma, v) = jacobi_columns(&w.transpose());
        Ok(Svd { u: v, sigma, vt: u.transpose() })
    }
}

/// For a tall `m x n` matrix returns `(U m x n, sigma, V n x n)`.
fn jacobi_columns(w: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = w.shape();
    // Column j of W lives in row j of `cols` so rotations touch contiguous memory.
    let mut cols = w.transpose();
    let mut v = Matrix::identity(n);
    let tol = f64::EPSILON * (m as f64).sqrt().max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (cols.row(i), cols.row(j));
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for k in 0..m {
                        a += ci[k] * ci[k];
                        b += cj[k] * cj[k];
                        g += ci[k] * cj[k];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, i, j, c, s);
                rotate_rows(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| cols.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let floor = sigma.first().copied().unwrap_or(0.0) * 1e-13;
    let mut u_rows: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            (s > floor && s > 0.0).then(|| cols.row(j).iter().map(|x| x / s).collect())
        })
        .collect();
    complete_orthonormal(&mut u_rows, m);

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    for (t, &j) in order.iter().enumerate() {
        let ut = u_rows[t].as_ref().expect("completed");
        for k in 0..m {
            u.set(k, t, ut[k]);
        }
        for k in 0..n {
            vm.set(k, t, v.get(j, k));
        }
    }
    (u, sigma, vm)
}

fn rotate_rows(mat: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = mat.cols();
    let data = mat.as_mut_slice();
    let (head, tail) = data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for k in 0..cols {
        let a = ri[k];
        let b = rj[k];
        ri[k] = c * a - s * b;
        rj[k] = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot, taking
/// for each slot the coordinate vector with the largest orthogonal residual.
fn complete_orthonormal(vecs: &mut [Option<Vec<f64>>], dim: usize) {
    for slot in 0..vecs.len() {
        if vecs[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for t in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[t] = 1.0;
            for _ in 0..2 {
                for other in vecs.iter().flatten() {
                    let dot: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= dot * o);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("dim > 0");
        cand.iter_mut().for_each(|c| *c /= norm);
        vecs[slot] = Some(cand);
    }
}
