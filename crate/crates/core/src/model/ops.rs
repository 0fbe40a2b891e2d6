//! Column-wise building blocks. Activations are `features x tokens`.

use crate::kernels::Matrix;

/// RMSNorm over each column: `y = w ⊙ x / sqrt(mean(x²) + eps)`.
/// Returns the output and the per-column inverse RMS.
pub fn rmsnorm(x: &Matrix, w: &[f64], eps: f64) -> (Matrix, Vec<f64>) {
    let (d, n) = x.shape();
    let mut sq = vec![0.0; n];
    for i in 0..d {
        for (s, v) in sq.iter_mut().zip(x.row(i)) {
            *s += v * v;
        }
    }
    let inv: Vec<f64> = sq.iter().map(|s| 1.0 / (s / d as f64 + eps).sqrt()).collect();
    let mut y = Matrix::zeros(d, n);
    for i in 0..d {
        let (xr, wi) = (x.row(i), w[i]);
        for ((o, v), r) in y.row_mut(i).iter_mut().zip(xr).zip(&inv) {
            *o = wi * v * r;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]; accumulates the weight gradient into `dw`.
pub fn rmsnorm_backward(x: &Matrix, w: &[f64], inv: &[f64], dy: &Matrix, dw: &mut [f64]) -> Matrix {
    let (d, n) = x.shape();
    // dot[j] = Σ_i w_i dy_ij x_ij
    let mut dot = vec![0.0; n];
    for i in 0..d {
        let (xr, dyr, wi) = (x.row(i), dy.row(i), w[i]);
        let mut acc = 0.0;
        for j in 0..n {
            acc += dyr[j] * xr[j] * inv[j];
            dot[j] += wi * dyr[j] * xr[j];
        }
        dw[i] += acc;
    }
    let mut dx = Matrix::zeros(d, n);
    for i in 0..d {
        let (xr, dyr, wi) = (x.row(i), dy.row(i), w[i]);
        let out = dx.row_mut(i);
        for j in 0..n {
            let r = inv[j];
            out[j] = r * wi * dyr[j] - xr[j] * r * r * r * dot[j] / d as f64;
        }
    }
    dx
}

/// Rotary position embedding, applied in place on rows `(h*hd + 2t, h*hd + 2t + 1)`.
/// `positions[j]` is the in-sequence position of column `j`; `sign = -1` inverts.
pub fn rope_in_place(x: &mut Matrix, n_heads: usize, positions: &[usize], base: f64, sign: f64) {
    let (d, n) = x.shape();
    let hd = d / n_heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|t| base.powf(-2.0 * t as f64 / hd as f64)).collect();
    let data = x.as_mut_slice();
    for h in 0..n_heads {
        for (t, f) in freqs.iter().enumerate() {
            let r0 = h * hd + 2 * t;
            let r1 = r0 + 1;
            for j in 0..n {
                let angle = positions[j] as f64 * f;
                let (s, c) = (sign * angle).sin_cos();
                let a = data[r0 * n + j];
                let b = data[r1 * n + j];
                data[r0 * n + j] = a * c - b * s;
                data[r1 * n + j] = a * s + b * c;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
