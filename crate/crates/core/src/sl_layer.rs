//! Sparse-plus-low-rank linear layer: `W = (alpha / r) * B A  ⊕_I  V`, optionally
//! on top of a frozen dense base `W0`.
//!
//! The layer never stores the composed `d x p` weight. Forward and the input
//! gradient build it transiently; the sparse-value gradient is taken by per-index
//! dot products so the `d x p` outer product `dZ Xᵀ` is never formed.

use crate::error::{Error, Result};
use crate::kernels::{
    matmul, matmul_nt, matmul_tn, sample_support, scatter_add_in_place, IndexSet, Matrix,
    SeededRng,
};

/// Number of sparse entries for a `d x p` matrix at density `delta`, `floor(delta d p)`.
///
/// Products that land within rounding noise of an integer are snapped to it so that
/// e.g. `0.05 * 100` counts as 5 and not 4.
pub fn sparse_nnz(d: usize, p: usize, delta: f64) -> usize {
    let exact = delta * (d * p) as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * exact.abs().max(1.0) {
        nearest as usize
    } else {
        exact.floor() as usize
    }
}

/// `B` (`d x r`) and `A` (`r x p`) with the LoRA-style multiplier `alpha / r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactor {
    b: Matrix,
    a: Matrix,
    alpha: f64,
}

impl LowRankFactor {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(Error::ShapeMismatch {
                op: "low-rank factor",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { b, a, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    /// `scale * B A`.
    pub fn product(&self) -> Matrix {
        let mut ba = matmul(&self.b, &self.a).expect("factor shapes validated");
        ba.scale_in_place(self.scale());
        ba
    }
}

/// Fixed support `I` and trainable values `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFactor {
    support: IndexSet,
    values: Vec<f64>,
    delta: f64,
}

impl SparseFactor {
    pub fn new(support: IndexSet, values: Vec<f64>, delta: f64) -> Result<Self> {
        if values.len() != support.len() {
            return Err(Error::LengthMismatch {
                what: "sparse values",
                expected: support.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse values".into()));
        }
        Ok(Self {
            support,
            values,
            delta,
        })
    }

    pub fn support(&self) -> &IndexSet {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values are trainable; the support is not exposed mutably.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Dense `d x p` view; export and test use only.
    pub fn to_dense(&self) -> Matrix {
        let (d, p) = self.support.shape();
        let mut m = Matrix::zeros(d, p);
        scatter_add_in_place(&mut m, &self.support, &self.values).expect("consistent factor");
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    Pretrain,
    Adapter,
}

/// Receives a record of every tensor a layer keeps alive for its backward pass.
pub trait RetentionHook {
    fn retain(&mut self, name: &'static str, shape: (usize, usize));
}

/// Hook that ignores everything.
pub struct NoRetention;

impl RetentionHook for NoRetention {
    fn retain(&mut self, _: &'static str, _: (usize, usize)) {}
}

/// Hook that collects retention records in order.
#[derive(Debug, Default)]
pub struct RetentionLog {
    pub entries: Vec<(&'static str, (usize, usize))>,
}

impl RetentionHook for RetentionLog {
    fn retain(&mut self, name: &'static str, shape: (usize, usize)) {
        self.entries.push((name, shape));
    }
}

/// Gradients of one layer for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub db: Matrix,
    pub da: Matrix,
    /// Aligned with the layer's support.
    pub dv: Vec<f64>,
    pub dx: Matrix,
}

/// Full parameter state of one sparse-plus-low-rank linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SlLinear {
    low_rank: LowRankFactor,
    sparse: SparseFactor,
    base: Option<Matrix>,
}

impl SlLinear {
    /// Pretraining initialization: Kaiming-uniform `A`, zero `B`, random support
    /// of `floor(delta d p)` entries with values uniform in `±1/sqrt(p)`.
    pub fn init(d: usize, p: usize, r: usize, delta: f64, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
        }
        Self::init_with_nnz(d, p, r, sparse_nnz(d, p, delta), alpha, rng, None)
            .map(|mut layer| {
                layer.sparse.delta = delta;
                layer
            })
    }

    /// Like [`SlLinear::init`] with an explicit support size. When given,
    /// `support_rng` draws the support and its values; otherwise `rng` draws
    /// `A`, then the support, then the values.
    ///
    /// `nnz = 0` gives a pure low-rank layer.
    pub fn init_with_nnz(
        d: usize,
        p: usize,
        r: usize,
        nnz: usize,
        alpha: f64,
        rng: &mut SeededRng,
        support_rng: Option<&mut SeededRng>,
    ) -> Result<Self> {
        if r == 0 || r >= d.min(p) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} must satisfy 0 < r < min({d}, {p})"
            )));
        }
        let bound = (6.0 / p as f64).sqrt();
        let a = Matrix::from_fn(r, p, |_, _| rng.uniform(-bound, bound));
        let b = Matrix::zeros(d, r);
        let support_rng = match support_rng {
            Some(s) => s,
            None => rng,
        };
        let support = sample_support(d, p, nnz, support_rng)?;
        let vb = 1.0 / (p as f64).sqrt();
        let values = (0..nnz).map(|_| support_rng.uniform(-vb, vb)).collect();
        let delta = nnz as f64 / (d * p) as f64;
        Ok(Self {
            low_rank: LowRankFactor::new(b, a, alpha)?,
            sparse: SparseFactor::new(support, values, delta)?,
            base: None,
        })
    }

    /// Records the nominal density the support size was derived from.
    pub(crate) fn with_nominal_delta(mut self, delta: f64) -> Self {
        self.sparse.delta = delta;
        self
    }

    /// Fine-tuning parameterization `W = W0 + B A + S` around a frozen `base`.
    ///
    /// `B` and `V` start at zero so the adapted layer initially reproduces `base`.
    pub fn adapter(base: Matrix, r: usize, delta: f64, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if !base.is_finite() {
            return Err(Error::NonFinite("adapter base".into()));
        }
        let (d, p) = base.shape();
        let mut layer = Self::init(d, p, r, delta, alpha, rng)?;
        layer.sparse.values.iter_mut().for_each(|v| *v = 0.0);
        layer.base = Some(base);
        Ok(layer)
    }

    pub fn from_parts(low_rank: LowRankFactor, sparse: SparseFactor, base: Option<Matrix>) -> Result<Self> {
        let d = low_rank.b.rows();
        let p = low_rank.a.cols();
        if sparse.support.shape() != (d, p) {
            return Err(Error::ShapeMismatch {
                op: "sparse support",
                left: (d, p),
                right: sparse.support.shape(),
            });
        }
        if let Some(w0) = &base {
            if w0.shape() != (d, p) {
                return Err(Error::ShapeMismatch {
                    op: "adapter base",
                    left: (d, p),
                    right: w0.shape(),
                });
            }
        }
        Ok(Self {
            low_rank,
            sparse,
            base,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.low_rank.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.low_rank.a.cols()
    }

    pub fn mode(&self) -> LayerMode {
        if self.base.is_some() {
            LayerMode::Adapter
        } else {
            LayerMode::Pretrain
        }
    }

    pub fn low_rank(&self) -> &LowRankFactor {
        &self.low_rank
    }

    pub fn low_rank_mut(&mut self) -> &mut LowRankFactor {
        &mut self.low_rank
    }

    pub fn sparse(&self) -> &SparseFactor {
        &self.sparse
    }

    pub fn sparse_values_mut(&mut self) -> &mut [f64] {
        &mut self.sparse.values
    }

    pub fn base(&self) -> Option<&Matrix> {
        self.base.as_ref()
    }

    /// Replaces `B` and `A` (same shapes), e.g. with truncated-SVD factors.
    pub fn set_low_rank(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        if b.shape() != self.low_rank.b.shape() || a.shape() != self.low_rank.a.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_low_rank",
                left: b.shape(),
                right: a.shape(),
            });
        }
        self.low_rank.b = b;
        self.low_rank.a = a;
        Ok(())
    }

    /// Trainable number count: `(d + p) r + nnz`.
    pub fn trainable_count(&self) -> usize {
        (self.out_dim() + self.in_dim()) * self.low_rank.rank() + self.sparse.nnz()
    }

    /// The composed weight `scale B A ⊕_I V (+ W0)`. Pure; used transiently.
    pub fn densify(&self) -> Matrix {
        let mut w = self.low_rank.product();
        scatter_add_in_place(&mut w, &self.sparse.support, &self.sparse.values)
            .expect("consistent factor");
        if let Some(w0) = &self.base {
            w.add_scaled(w0, 1.0).expect("validated base shape");
        }
        w
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "sl_linear input",
                left: (self.out_dim(), self.in_dim()),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// `Z = W X` for `X` of shape `p x n`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_traced(x, &mut NoRetention)
    }

    /// Forward pass that reports what must be kept for [`SlLinear::backward`].
    pub fn forward_traced(&self, x: &Matrix, hook: &mut dyn RetentionHook) -> Result<Matrix> {
        self.check_input(x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("sl_linear input".into()));
        }
        let z = matmul(&self.densify(), x)?;
        hook.retain("X", x.shape());
        hook.retain("B", self.low_rank.b.shape());
        hook.retain("A", self.low_rank.a.shape());
        hook.retain("I", (self.sparse.nnz(), 1));
        hook.retain("V", (self.sparse.nnz(), 1));
        if let Some(w0) = &self.base {
            hook.retain("W0", w0.shape());
        }
        Ok(z)
    }

    /// Gradients for the inputs `x` (`p x n`) and output cotangent `dz` (`d x n`).
    /// Column gradients are summed over the batch.
    pub fn backward(&self, x: &Matrix, dz: &Matrix) -> Result<LayerGradients> {
        self.check_input(x)?;
        if dz.rows() != self.out_dim() || dz.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "sl_linear backward",
                left: (self.out_dim(), x.cols()),
                right: dz.shape(),
            });
        }
        let lr = &self.low_rank;
        let s = lr.scale();

        // dB = s dZ (A X)ᵀ, dA = s (Bᵀ dZ) Xᵀ: no d x p temporaries.
        let ax = matmul(&lr.a, x)?;
        let mut db = matmul_nt(dz, &ax)?;
        db.scale_in_place(s);
        let bt_dz = matmul_tn(&lr.b, dz)?;
        let mut da = matmul_nt(&bt_dz, x)?;
        da.scale_in_place(s);

        let p = self.in_dim();
        let dv = self
            .sparse
            .support
            .as_slice()
            .iter()
            .map(|&flat| {
                let (i, j) = (flat / p, flat % p);
                dz.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum()
            })
            .collect();

        let dx = matmul_tn(&self.densify(), dz)?;
        Ok(LayerGradients { db, da, dv, dx })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gather, svd_small};
    use proptest::prelude::*;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
    }

    /// Layer with every parameter randomized (B nonzero).
    fn random_layer(seed: u64, d: usize, p: usize, r: usize, delta: f64) -> SlLinear {
        let mut rng = SeededRng::new(seed);
        let mut layer = SlLinear::init(d, p, r, delta, 2.0 * r as f64, &mut rng).unwrap();
        let b = random_matrix(&mut rng, d, r);
        let a = random_matrix(&mut rng, r, p);
        layer.set_low_rank(b, a).unwrap();
        layer
    }

    #[test]
    fn nnz_floor() {
        assert_eq!(sparse_nnz(512, 512, 0.03), 7864);
        assert_eq!(sparse_nnz(10, 10, 0.05), 5);
        assert_eq!(sparse_nnz(3, 3, 0.05), 0);
    }

    #[test]
    fn init_shapes_and_ranges() {
        let mut rng = SeededRng::new(1);
        let layer = SlLinear::init(512, 512, 128, 0.03, 32.0, &mut rng).unwrap();
        assert_eq!(layer.sparse().nnz(), 7864);
        assert!(layer.low_rank().b().as_slice().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 512.0).sqrt();
        assert!(layer.low_rank().a().as_slice().iter().all(|v| v.abs() <= bound));
        assert_eq!(layer.mode(), LayerMode::Pretrain);
        assert_eq!(layer.low_rank().scale(), 0.25);
    }

    #[test]
    fn init_values_bounded_and_centered() {
        // 10^5 values: mean of Uniform[-c, c] has σ = c / sqrt(3N).
        let mut rng = SeededRng::new(2);
        let (d, p) = (400, 500);
        let layer = SlLinear::init(d, p, 8, 0.5, 16.0, &mut rng).unwrap();
        let v = layer.sparse().values();
        assert_eq!(v.len(), 100_000);
        let c = 1.0 / (p as f64).sqrt();
        assert!(v.iter().all(|x| x.abs() <= c));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sigma = c / (3.0 * v.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn init_rejects_bad_hyperparameters() {
        let mut rng = SeededRng::new(0);
        assert!(SlLinear::init(4, 4, 4, 0.1, 1.0, &mut rng).is_err());
        assert!(SlLinear::init(4, 4, 0, 0.1, 1.0, &mut rng).is_err());
        assert!(SlLinear::init(4, 4, 2, 0.0, 1.0, &mut rng).is_err());
        assert!(SlLinear::init(4, 4, 2, 1.0, 1.0, &mut rng).is_err());
        assert!(SlLinear::init(4, 4, 2, 0.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn fresh_layer_is_its_sparse_factor() {
        let mut rng = SeededRng::new(3);
        let layer = SlLinear::init(6, 5, 2, 0.3, 4.0, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 3);
        let z = layer.forward(&x).unwrap();
        assert_eq!(z, matmul(&layer.sparse().to_dense(), &x).unwrap());
    }

    #[test]
    fn sparse_only_hand_case() {
        let lr = LowRankFactor::new(Matrix::zeros(2, 1), Matrix::zeros(1, 2), 1.0).unwrap();
        let sp = SparseFactor::new(IndexSet::new(2, 2, vec![0]).unwrap(), vec![2.0], 0.25).unwrap();
        let layer = SlLinear::from_parts(lr, sp, None).unwrap();
        let x = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_weight_gives_zero_output() {
        let mut rng = SeededRng::new(4);
        let mut layer = SlLinear::init(5, 4, 2, 0.2, 4.0, &mut rng).unwrap();
        layer.sparse_values_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = random_matrix(&mut rng, 4, 3);
        assert!(layer.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_dense_weight() {
        let layer = random_layer(5, 5, 4, 2, 0.2);
        let mut rng = SeededRng::new(50);
        let x = random_matrix(&mut rng, 4, 3);
        let z = layer.forward(&x).unwrap();
        assert!(z.max_abs_diff(&matmul(&layer.densify(), &x).unwrap()) <= 1e-12);
    }

    #[test]
    fn densify_cases() {
        let mut rng = SeededRng::new(6);
        let lr = LowRankFactor::new(Matrix::zeros(3, 1), random_matrix(&mut rng, 1, 2), 1.0).unwrap();
        let sp = SparseFactor::new(IndexSet::empty(3, 2), vec![], 0.0).unwrap();
        assert_eq!(SlLinear::from_parts(lr, sp, None).unwrap().densify(), Matrix::zeros(3, 2));

        let w0 = random_matrix(&mut rng, 6, 5);
        let adapter = SlLinear::adapter(w0.clone(), 2, 0.2, 8.0, &mut rng).unwrap();
        assert_eq!(adapter.mode(), LayerMode::Adapter);
        assert_eq!(adapter.densify(), w0);
    }

    #[test]
    fn densify_equals_forward_on_identity() {
        let layer = random_layer(7, 6, 5, 2, 0.3);
        let z = layer.forward(&Matrix::identity(5)).unwrap();
        assert!(z.max_abs_diff(&layer.densify()) <= 1e-12);
    }

    #[test]
    fn forward_errors() {
        let layer = random_layer(8, 4, 3, 1, 0.3);
        assert!(matches!(layer.forward(&Matrix::zeros(4, 2)), Err(Error::ShapeMismatch { .. })));
        let mut x = Matrix::zeros(3, 1);
        x.as_mut_slice()[0] = f64::NAN;
        assert!(matches!(layer.forward(&x), Err(Error::NonFinite(_))));
        assert!(layer.backward(&Matrix::zeros(3, 2), &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn zero_cotangent_zero_gradients() {
        let layer = random_layer(9, 6, 5, 2, 0.3);
        let mut rng = SeededRng::new(90);
        let x = random_matrix(&mut rng, 5, 4);
        let g = layer.backward(&x, &Matrix::zeros(6, 4)).unwrap();
        assert!(g.db.as_slice().iter().chain(g.da.as_slice()).chain(&g.dv).chain(g.dx.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_vector_sparse_gradient() {
        let layer = random_layer(10, 4, 3, 1, 0.5);
        for i in 0..4 {
            for j in 0..3 {
                let x = Matrix::from_fn(3, 1, |r, _| (r == j) as u8 as f64);
                let dz = Matrix::from_fn(4, 1, |r, _| (r == i) as u8 as f64);
                let g = layer.backward(&x, &dz).unwrap();
                for (k, &flat) in layer.sparse().support().as_slice().iter().enumerate() {
                    let expect = if flat == i * 3 + j { 1.0 } else { 0.0 };
                    assert_eq!(g.dv[k], expect);
                }
            }
        }
    }

    #[test]
    fn sparse_input_gradient_route_agrees() {
        // dX = s Aᵀ (Bᵀ dZ) + Sᵀ dZ, evaluated without the composed weight.
        let layer = random_layer(11, 7, 6, 3, 0.25);
        let mut rng = SeededRng::new(110);
        let x = random_matrix(&mut rng, 6, 4);
        let dz = random_matrix(&mut rng, 7, 4);
        let g = layer.backward(&x, &dz).unwrap();
        let lr = layer.low_rank();
        let mut dx = matmul_tn(lr.a(), &matmul_tn(lr.b(), &dz).unwrap()).unwrap();
        dx.scale_in_place(lr.scale());
        for ((i, j), &v) in layer.sparse().support().coords().zip(layer.sparse().values()) {
            for b in 0..4 {
                let cur = dx.get(j, b);
                dx.set(j, b, cur + v * dz.get(i, b));
            }
        }
        assert!(g.dx.max_abs_diff(&dx) <= 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, p, r, n) = (6, 5, 2, 4);
        let layer = random_layer(12, d, p, r, 0.15);
        let mut rng = SeededRng::new(120);
        let x = random_matrix(&mut rng, p, n);
        let loss = |l: &SlLinear, x: &Matrix| -> f64 {
            l.forward(x).unwrap().as_slice().iter().map(|z| 0.5 * z * z).sum()
        };
        let dz = layer.forward(&x).unwrap();
        let g = layer.backward(&x, &dz).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-6, "analytic {analytic} fd {fd}");
        };
        for idx in 0..d * r {
            let mut lp = layer.clone();
            lp.low_rank_mut().b_mut().as_mut_slice()[idx] += h;
            let mut lm = layer.clone();
            lm.low_rank_mut().b_mut().as_mut_slice()[idx] -= h;
            check(g.db.as_slice()[idx], loss(&lp, &x), loss(&lm, &x));
        }
        for idx in 0..r * p {
            let mut lp = layer.clone();
            lp.low_rank_mut().a_mut().as_mut_slice()[idx] += h;
            let mut lm = layer.clone();
            lm.low_rank_mut().a_mut().as_mut_slice()[idx] -= h;
            check(g.da.as_slice()[idx], loss(&lp, &x), loss(&lm, &x));
        }
        for k in 0..layer.sparse().nnz() {
            let mut lp = layer.clone();
            lp.sparse_values_mut()[k] += h;
            let mut lm = layer.clone();
            lm.sparse_values_mut()[k] -= h;
            check(g.dv[k], loss(&lp, &x), loss(&lm, &x));
        }
        for idx in 0..p * n {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            check(g.dx.as_slice()[idx], loss(&layer, &xp), loss(&layer, &xm));
        }
    }

    #[test]
    fn adapter_gradients_through_base() {
        let mut rng = SeededRng::new(13);
        let w0 = random_matrix(&mut rng, 5, 4);
        let mut layer = SlLinear::adapter(w0.clone(), 2, 0.3, 4.0, &mut rng).unwrap();
        let b = random_matrix(&mut rng, 5, 2);
        let a = layer.low_rank().a().clone();
        layer.set_low_rank(b, a).unwrap();
        let x = random_matrix(&mut rng, 4, 3);
        let dz = random_matrix(&mut rng, 5, 3);
        let g = layer.backward(&x, &dz).unwrap();
        let w = layer.densify();
        assert!(g.dx.max_abs_diff(&matmul_tn(&w, &dz).unwrap()) <= 1e-12);
        let dw = matmul_nt(&dz, &x).unwrap();
        let dv = gather(&dw, layer.sparse().support()).unwrap();
        for (a, b) in g.dv.iter().zip(&dv) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(layer.base(), Some(&w0));
    }

    #[test]
    fn retention_is_factors_and_input_only() {
        let layer = random_layer(14, 8, 6, 2, 0.25);
        let x = Matrix::zeros(6, 3);
        let mut log = RetentionLog::default();
        layer.forward_traced(&x, &mut log).unwrap();
        let names: Vec<_> = log.entries.iter().map(|e| e.0).collect();
        assert_eq!(names, vec!["X", "B", "A", "I", "V"]);
        assert!(log.entries.iter().all(|(_, shape)| *shape != (8, 6)));
    }

    #[test]
    fn rank_exceeds_low_rank_part() {
        let (d, p, r) = (32, 32, 3);
        for seed in 0..50 {
            let layer = random_layer(seed, d, p, r, 0.1);
            assert!(layer.sparse().nnz() >= d);
            let s = svd_small(&layer.densify()).unwrap();
            let rank = s.sigma.iter().filter(|&&x| x > 1e-10 * s.sigma[0]).count();
            assert!(rank > r, "seed {seed}: rank {rank}");
        }
    }

    proptest! {
        #[test]
        fn backward_is_linear_in_cotangent(seed in any::<u64>()) {
            let layer = random_layer(seed, 5, 4, 2, 0.3);
            let mut rng = SeededRng::new(seed ^ 0xabc);
            let x = random_matrix(&mut rng, 4, 3);
            let dz = random_matrix(&mut rng, 5, 3);
            let g1 = layer.backward(&x, &dz).unwrap();
            let g2 = layer.backward(&x, &dz.scaled(2.0)).unwrap();
            prop_assert_eq!(g2.db, g1.db.scaled(2.0));
            prop_assert_eq!(g2.da, g1.da.scaled(2.0));
            prop_assert_eq!(g2.dx, g1.dx.scaled(2.0));
            prop_assert_eq!(g2.dv, g1.dv.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        }
    }
}
