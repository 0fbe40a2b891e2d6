//! Spectra, best rank-r approximation, residual statistics, pruning and
//! low-rank/sparse spectrum decomposition.

use crate::error::{Error, Result};
use crate::kernels::{gather, matmul, sample_support, svd_small, IndexSet, Matrix, SeededRng, Svd};
use crate::sl_layer::SparseFactor;

/// Count of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(sigma: &[f64], rel_tol: f64) -> usize {
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > rel_tol * max).count()
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let k = w.rows().min(w.cols());
    if r > k {
        return Err(Error::InvalidArgument(format!("rank {r} exceeds min dimension {k}")));
    }
    Ok(())
}

fn truncate(svd: &Svd, r: usize) -> (Matrix, Matrix) {
    let (m, n) = (svd.u.rows(), svd.vt.cols());
    let us = Matrix::from_fn(m, r, |i, t| svd.u.get(i, t) * svd.sigma[t]);
    let vt = Matrix::from_fn(r, n, |t, j| svd.vt.get(t, j));
    (us, vt)
}

/// `U_r Σ_r V_rᵀ`, the closest rank-`r` matrix in Frobenius norm.
pub fn best_rank_r(w: &Matrix, r: usize) -> Result<Matrix> {
    check_rank(w, r)?;
    let (us, vt) = truncate(&svd_small(w)?, r);
    matmul(&us, &vt)
}

/// Factors `(B, A)` with `scale * B A = best_rank_r(w, r)`: `B = U_r Σ_r / scale`, `A = V_rᵀ`.
pub fn best_rank_r_factors(w: &Matrix, r: usize, scale: f64) -> Result<(Matrix, Matrix)> {
    check_rank(w, r)?;
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let (us, vt) = truncate(&svd_small(w)?, r);
    Ok((us.scaled(1.0 / scale), vt))
}

/// Empirical distribution of entry magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    sorted: Vec<f64>,
    /// `(threshold, fraction of |entries| <= threshold)`.
    pub fraction_below: Vec<(f64, f64)>,
}

pub const DEFAULT_QUANTILES: [f64; 6] = [0.5, 0.9, 0.95, 0.97, 0.99, 1.0];

impl ResidualStats {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Smallest magnitude `m` with `cdf(m) >= q`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.sorted.len();
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.sorted[idx]
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.sorted.partition_point(|&m| m <= t) as f64 / self.sorted.len() as f64
    }

    /// `(magnitude, cdf)` at up to `max_points` evenly spaced ranks, always ending at 1.
    pub fn cdf_points(&self, max_points: usize) -> Vec<(f64, f64)> {
        let n = self.sorted.len();
        let step = n.div_ceil(max_points.max(1)).max(1);
        let mut out: Vec<(f64, f64)> = (1..=n)
            .step_by(step)
            .map(|k| (self.sorted[k - 1], k as f64 / n as f64))
            .collect();
        if out.last().map(|p| p.1) != Some(1.0) {
            out.push((self.sorted[n - 1], 1.0));
        }
        out
    }
}

pub fn residual_stats(r: &Matrix, thresholds: &[f64]) -> Result<ResidualStats> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("residual matrix is empty".into()));
    }
    let mut sorted: Vec<f64> = r.as_slice().iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut stats = ResidualStats {
        sorted,
        fraction_below: Vec::new(),
    };
    stats.fraction_below = thresholds.iter().map(|&t| (t, stats.cdf(t))).collect();
    Ok(stats)
}

fn check_k(r: &Matrix, k: usize) -> Result<()> {
    if k > r.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} entries", r.len())));
    }
    Ok(())
}

fn factor_from(r: &Matrix, support: IndexSet) -> Result<SparseFactor> {
    let values = gather(r, &support)?;
    let delta = support.len() as f64 / r.len().max(1) as f64;
    SparseFactor::new(support, values, delta)
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower flat index.
pub fn prune_top(r: &Matrix, k: usize) -> Result<SparseFactor> {
    check_k(r, k)?;
    let data = r.as_slice();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[j].abs().total_cmp(&data[i].abs()).then(i.cmp(&j)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    factor_from(r, IndexSet::new(r.rows(), r.cols(), keep)?)
}

/// Keeps `k` entries at a uniformly random support.
pub fn prune_random(r: &Matrix, k: usize, rng: &mut SeededRng) -> Result<SparseFactor> {
    check_k(r, k)?;
    factor_from(r, sample_support(r.rows(), r.cols(), k, rng)?)
}

/// Singular values of `W = s B A + S` and their split into low-rank and sparse parts.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub sigma: Vec<f64>,
    /// `diag(Uᵀ (s B A) V)`.
    pub low_rank: Option<Vec<f64>>,
    /// `diag(Uᵀ S V)`.
    pub sparse: Option<Vec<f64>>,
}

impl SpectrumReport {
    /// `max_i |sigma_i - low_i - sparse_i|`, when both parts are present.
    pub fn additivity_error(&self) -> Option<f64> {
        let (l, s) = (self.low_rank.as_ref()?, self.sparse.as_ref()?);
        Some(
            self.sigma
                .iter()
                .zip(l)
                .zip(s)
                .map(|((x, a), b)| (x - a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

pub fn spectrum(w: &Matrix) -> Result<SpectrumReport> {
    Ok(SpectrumReport {
        sigma: svd_small(w)?.sigma,
        low_rank: None,
        sparse: None,
    })
}

/// `diag(Uᵀ M V)` for the thin SVD factors.
fn projected_diag(svd: &Svd, m: &Matrix) -> Result<Vec<f64>> {
    let mv = crate::kernels::matmul_nt(m, &svd.vt)?;
    Ok((0..svd.sigma.len())
        .map(|t| (0..svd.u.rows()).map(|i| svd.u.get(i, t) * mv.get(i, t)).sum())
        .collect())
}

pub fn decompose_spectrum(b: &Matrix, a: &Matrix, s: f64, sparse: &SparseFactor) -> Result<SpectrumReport> {
    let mut low = matmul(b, a)?;
    low.scale_in_place(s);
    let dense_s = sparse.to_dense();
    if dense_s.shape() != low.shape() {
        return Err(Error::ShapeMismatch {
            op: "decompose_spectrum",
            left: low.shape(),
            right: dense_s.shape(),
        });
    }
    let mut w = low.clone();
    w.add_scaled(&dense_s, 1.0)?;
    let svd = svd_small(&w)?;
    Ok(SpectrumReport {
        low_rank: Some(projected_diag(&svd, &low)?),
        sparse: Some(projected_diag(&svd, &dense_s)?),
        sigma: svd.sigma,
    })
}

/// `matrix,index,sigma` rows.
pub fn spectrum_csv(rows: &[(String, SpectrumReport)]) -> String {
    let mut out = String::from("matrix,index,sigma\n");
    for (name, rep) in rows {
        for (i, s) in rep.sigma.iter().enumerate() {
            out.push_str(&format!("{name},{i},{s:e}\n"));
        }
    }
    out
}

/// `matrix,index,sigma,low_rank,sparse` rows for reports carrying both parts.
pub fn decomposition_csv(rows: &[(String, SpectrumReport)]) -> String {
    let mut out = String::from("matrix,index,sigma,low_rank,sparse\n");
    for (name, rep) in rows {
        if let (Some(l), Some(s)) = (&rep.low_rank, &rep.sparse) {
            for i in 0..rep.sigma.len() {
                out.push_str(&format!("{name},{i},{:e},{:e},{:e}\n", rep.sigma[i], l[i], s[i]));
            }
        }
    }
    out
}

/// `matrix,magnitude,cdf` rows.
pub fn residual_cdf_csv(rows: &[(String, ResidualStats)], max_points: usize) -> String {
    let mut out = String::from("matrix,magnitude,cdf\n");
    for (name, st) in rows {
        for (m, c) in st.cdf_points(max_points) {
            out.push_str(&format!("{name},{m:e},{c}\n"));
        }
    }
    out
}
