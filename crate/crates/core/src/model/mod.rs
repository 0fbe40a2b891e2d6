//! LLaMA-style decoder (pre-norm RMSNorm, rotary attention, SwiGLU MLP) whose
//! attention and MLP projections are sparse-plus-low-rank, low-rank or dense.
//! Forward and backward are written out by hand.

mod config;
mod ops;
mod pass;

use std::collections::BTreeMap;

pub use config::{default_inner, ModelConfig, ParamMode};
pub use pass::{Batch, ForwardCache, ForwardOutput, Gradients};

use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, Matrix, SeededRng};
use crate::sl_layer::{sparse_nnz, SlLinear};

/// Names of the seven projections of a block, in storage order.
pub const PROJECTION_NAMES: [&str; 7] = [
    "attn.q", "attn.k", "attn.v", "attn.o", "mlp.gate", "mlp.up", "mlp.down",
];

/// Role of a trainable tensor, used by freeze flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Head,
    DenseLinear,
    LowRankB,
    LowRankA,
    SparseValues,
}

/// A linear map `out x in` applied as `Z = W X`.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Dense(Matrix),
    Factored(SlLinear),
}

/// Gradient of one projection's parameters.
#[derive(Clone, Debug)]
pub enum ProjectionGrad {
    Dense(Matrix),
    Factored { db: Matrix, da: Matrix, dv: Vec<f64> },
}

impl Projection {
    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.rows(),
            Projection::Factored(l) => l.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.cols(),
            Projection::Factored(l) => l.in_dim(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Projection::Dense(w) => matmul(w, x),
            Projection::Factored(l) => l.forward(x),
        }
    }

    pub fn backward(&self, x: &Matrix, dz: &Matrix) -> Result<(ProjectionGrad, Matrix)> {
        match self {
            Projection::Dense(w) => Ok((ProjectionGrad::Dense(matmul_nt(dz, x)?), matmul_tn(w, dz)?)),
            Projection::Factored(l) => {
                let g = l.backward(x, dz)?;
                Ok((
                    ProjectionGrad::Factored {
                        db: g.db,
                        da: g.da,
                        dv: g.dv,
                    },
                    g.dx,
                ))
            }
        }
    }

    /// Effective dense weight (composes factored layers).
    pub fn weight(&self) -> Matrix {
        match self {
            Projection::Dense(w) => w.clone(),
            Projection::Factored(l) => l.densify(),
        }
    }

    pub fn as_factored(&self) -> Option<&SlLinear> {
        match self {
            Projection::Factored(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }

    pub fn as_factored_mut(&mut self) -> Option<&mut SlLinear> {
        match self {
            Projection::Factored(l) => Some(l),
            Projection::Dense(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    /// `q, k, v, o, gate, up, down`.
    pub proj: [Projection; 7],
    pub mlp_norm: Vec<f64>,
}

/// Complete model parameter state.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub embed: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    /// `None` when tied to the embedding.
    pub head: Option<Matrix>,
    version: u64,
}

/// Equality of configuration and parameters; the cache version is ignored.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
            && self.head == other.head
    }
}

const STREAM_EMBED: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_PROJ: u64 = 1_000;
const STREAM_SUPPORT: u64 = 1_000_000;

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> Matrix {
    let bound = (6.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

impl Model {
    /// Deterministic initialization; every tensor draws from its own stream so
    /// changing the sparse budget never shifts other tensors.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.seed;
        let support_seed = config.support_seed.unwrap_or(seed);
        let embed = kaiming_uniform(config.vocab, d, d, &mut SeededRng::with_stream(seed, STREAM_EMBED));
        let head = (!config.tie_embeddings)
            .then(|| kaiming_uniform(config.vocab, d, d, &mut SeededRng::with_stream(seed, STREAM_HEAD)));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let shapes = config.block_projection_shapes();
            let mut proj = Vec::with_capacity(7);
            for (slot, &(out, inp)) in shapes.iter().enumerate() {
                let id = (layer * 7 + slot) as u64;
                let mut rng = SeededRng::with_stream(seed, STREAM_PROJ + id);
                let p = match config.mode {
                    ParamMode::FullRank => Projection::Dense(kaiming_uniform(out, inp, inp, &mut rng)),
                    ParamMode::LowRank | ParamMode::Sltrain => {
                        let nnz = if config.mode == ParamMode::Sltrain {
                            sparse_nnz(out, inp, config.delta)
                        } else {
                            0
                        };
                        let mut srng = SeededRng::with_stream(support_seed, STREAM_SUPPORT + id);
                        Projection::Factored(SlLinear::init_with_nnz(
                            out,
                            inp,
                            config.rank,
                            nnz,
                            config.alpha,
                            &mut rng,
                            Some(&mut srng),
                        )?
                        .with_nominal_delta(if nnz > 0 { config.delta } else { 0.0 }))
                    }
                };
                proj.push(p);
            }
            let proj: [Projection; 7] = proj.try_into().expect("seven projections");
            blocks.push(Block {
                attn_norm: vec![1.0; d],
                proj,
                mlp_norm: vec![1.0; d],
            });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            final_norm: vec![1.0; d],
            head,
            version: 0,
        })
    }

    /// Assembles a model from explicit tensors (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        embed: Matrix,
        blocks: Vec<Block>,
        final_norm: Vec<f64>,
        head: Option<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if embed.shape() != (config.vocab, d) {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: (config.vocab, d),
                right: embed.shape(),
            });
        }
        if blocks.len() != config.n_layers || final_norm.len() != d {
            return Err(Error::Format("block count or final norm size disagrees with config".into()));
        }
        if head.is_none() != config.tie_embeddings {
            return Err(Error::Format("head presence disagrees with tie_embeddings".into()));
        }
        if let Some(h) = &head {
            if h.shape() != (config.vocab, d) {
                return Err(Error::ShapeMismatch {
                    op: "head",
                    left: (config.vocab, d),
                    right: h.shape(),
                });
            }
        }
        let shapes = config.block_projection_shapes();
        for b in &blocks {
            if b.attn_norm.len() != d || b.mlp_norm.len() != d {
                return Err(Error::Format("norm weight size disagrees with config".into()));
            }
            for (p, &(o, i)) in b.proj.iter().zip(&shapes) {
                if (p.out_dim(), p.in_dim()) != (o, i) {
                    return Err(Error::ShapeMismatch {
                        op: "projection",
                        left: (o, i),
                        right: (p.out_dim(), p.in_dim()),
                    });
                }
            }
        }
        Ok(Self {
            config,
            embed,
            blocks,
            final_norm,
            head,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter generation; bumped on every mutable parameter access.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn head_matrix(&self) -> &Matrix {
        self.head.as_ref().unwrap_or(&self.embed)
    }

    pub(crate) fn layer_name(layer: usize, slot: usize) -> String {
        format!("blocks.{layer}.{}", PROJECTION_NAMES[slot])
    }

    /// Every projection with its `blocks.<l>.<slot>` name, in storage order.
    pub fn projections(&self) -> Vec<(String, &Projection)> {
        let mut out = Vec::new();
        for (li, b) in self.blocks.iter().enumerate() {
            for (slot, p) in b.proj.iter().enumerate() {
                out.push((Self::layer_name(li, slot), p));
            }
        }
        out
    }

    /// Number of sparse-plus-low-rank (or low-rank) layers.
    pub fn factored_layer_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.proj.iter())
            .filter(|p| p.as_factored().is_some())
            .count()
    }

    /// Number of layers carrying a nonempty sparse support.
    pub fn sparse_layer_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.proj.iter())
            .filter_map(|p| p.as_factored())
            .filter(|l| l.sparse().nnz() > 0)
            .count()
    }

    /// Visits every trainable tensor in a fixed order. Frozen adapter bases are
    /// not trainable and never visited.
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamKind, &[f64])) {
        f("embed", ParamKind::Embedding, self.embed.as_slice());
        for (li, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{li}.attn_norm"), ParamKind::Norm, &b.attn_norm);
            f(&format!("blocks.{li}.mlp_norm"), ParamKind::Norm, &b.mlp_norm);
            for (slot, p) in b.proj.iter().enumerate() {
                let name = Self::layer_name(li, slot);
                match p {
                    Projection::Dense(w) => f(&format!("{name}.weight"), ParamKind::DenseLinear, w.as_slice()),
                    Projection::Factored(l) => {
                        f(&format!("{name}.B"), ParamKind::LowRankB, l.low_rank().b().as_slice());
                        f(&format!("{name}.A"), ParamKind::LowRankA, l.low_rank().a().as_slice());
                        if l.sparse().nnz() > 0 {
                            f(&format!("{name}.sparse_val"), ParamKind::SparseValues, l.sparse().values());
                        }
                    }
                }
            }
        }
        f("final_norm", ParamKind::Norm, &self.final_norm);
        if let Some(h) = &self.head {
            f("head", ParamKind::Head, h.as_slice());
        }
    }

    /// Mutable counterpart of [`Model::visit_params`]; invalidates forward caches.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut [f64]) -> Result<()>) -> Result<()> {
        self.version += 1;
        f("embed", ParamKind::Embedding, self.embed.as_mut_slice())?;
        for (li, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{li}.attn_norm"), ParamKind::Norm, &mut b.attn_norm)?;
            f(&format!("blocks.{li}.mlp_norm"), ParamKind::Norm, &mut b.mlp_norm)?;
            for (slot, p) in b.proj.iter_mut().enumerate() {
                let name = Self::layer_name(li, slot);
                match p {
                    Projection::Dense(w) => {
                        f(&format!("{name}.weight"), ParamKind::DenseLinear, w.as_mut_slice())?
                    }
                    Projection::Factored(l) => {
                        f(&format!("{name}.B"), ParamKind::LowRankB, l.low_rank_mut().b_mut().as_mut_slice())?;
                        f(&format!("{name}.A"), ParamKind::LowRankA, l.low_rank_mut().a_mut().as_mut_slice())?;
                        if l.sparse().nnz() > 0 {
                            f(&format!("{name}.sparse_val"), ParamKind::SparseValues, l.sparse_values_mut())?;
                        }
                    }
                }
            }
        }
        f("final_norm", ParamKind::Norm, &mut self.final_norm)?;
        if let Some(h) = &mut self.head {
            f("head", ParamKind::Head, h.as_mut_slice())?;
        }
        Ok(())
    }

    /// Mutable access to one projection; invalidates forward caches.
    pub fn projection_mut(&mut self, layer: usize, slot: usize) -> &mut Projection {
        self.version += 1;
        &mut self.blocks[layer].proj[slot]
    }

    /// Total trainable numbers.
    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, t| n += t.len());
        n
    }

    /// Trainable numbers grouped by role.
    pub fn count_by_kind(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        self.visit_params(|_, kind, t| {
            let key = match kind {
                ParamKind::Embedding | ParamKind::Norm | ParamKind::Head => "non_adapted",
                ParamKind::DenseLinear => "dense_linear",
                ParamKind::LowRankA | ParamKind::LowRankB => "low_rank",
                ParamKind::SparseValues => "sparse",
            };
            *out.entry(key).or_insert(0) += t.len();
        });
        out
    }

    /// Replaces every dense projection by an adapter `W0 + B A + S` with a
    /// frozen base, for fine-tuning.
    pub fn into_adapter(mut self, rank: usize, delta: f64, alpha: f64, seed: u64) -> Result<Self> {
        for (li, b) in self.blocks.iter_mut().enumerate() {
            for (slot, p) in b.proj.iter_mut().enumerate() {
                let base = p.weight();
                let id = (li * 7 + slot) as u64;
                let mut rng = SeededRng::with_stream(seed, STREAM_PROJ + id);
                *p = Projection::Factored(SlLinear::adapter(base, rank, delta, alpha, &mut rng)?);
            }
        }
        self.config.rank = rank;
        self.config.delta = delta;
        self.config.alpha = alpha;
        self.config.mode = ParamMode::Sltrain;
        self.version += 1;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: ParamMode) -> ModelConfig {
        ModelConfig {
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_inner: Some(172),
            seq_len: 16,
            rank: 16,
            delta: 0.03,
            alpha: 32.0,
            mode,
            seed: 3,
            support_seed: None,
            rope: true,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            tie_embeddings: false,
        }
    }

    #[test]
    fn full_rank_has_no_factored_layers() {
        let m = Model::init(&tiny(ParamMode::FullRank)).unwrap();
        assert_eq!(m.factored_layer_count(), 0);
    }

    #[test]
    fn sltrain_projections_start_as_sparse_factor() {
        let m = Model::init(&tiny(ParamMode::Sltrain)).unwrap();
        assert_eq!(m.sparse_layer_count(), 14);
        for b in &m.blocks {
            for p in &b.proj {
                let l = p.as_factored().unwrap();
                assert_eq!(l.densify(), l.sparse().to_dense());
            }
        }
    }

    #[test]
    fn parameter_count_matches_shape_sum() {
        // Independent enumeration: embeddings + head + norms + per-projection (d+p)r + floor(δdp).
        let (v, d, l, m, r) = (256usize, 64usize, 2usize, 172usize, 16usize);
        let shapes = [(d, d), (d, d), (d, d), (d, d), (m, d), (m, d), (d, m)];
        let per_block: usize = shapes
            .iter()
            .map(|&(o, i)| (o + i) * r + ((0.03 * (o * i) as f64).floor() as usize))
            .sum();
        let expect = 2 * v * d + (2 * l + 1) * d + l * per_block;
        assert_eq!(expect, 32_768 + 320 + 2 * (4 * (2048 + 122) + 2 * (3776 + 330) + (3776 + 330)));
        let model = Model::init(&tiny(ParamMode::Sltrain)).unwrap();
        assert_eq!(model.trainable_count(), expect);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(&tiny(ParamMode::Sltrain)).unwrap();
        let b = Model::init(&tiny(ParamMode::Sltrain)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_rank_is_sltrain_without_support() {
        let lr = Model::init(&tiny(ParamMode::LowRank)).unwrap();
        let mut cfg = tiny(ParamMode::Sltrain);
        cfg.delta = 1e-9;
        let sl = Model::init(&cfg).unwrap();
        assert_eq!(sl.sparse_layer_count(), 0);
        assert_eq!(lr.blocks, sl.blocks);
        assert_eq!(lr.embed, sl.embed);
    }

    #[test]
    fn adapter_conversion_freezes_base() {
        let full = Model::init(&tiny(ParamMode::FullRank)).unwrap();
        let w = full.blocks[0].proj[0].weight();
        let ad = full.into_adapter(4, 0.01, 8.0, 1).unwrap();
        assert_eq!(ad.blocks[0].proj[0].weight(), w);
        let mut names = Vec::new();
        ad.visit_params(|n, _, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.ends_with(".base") && !n.ends_with(".weight")));
    }
}
