//! Parameter and optimizer-state memory estimates under a bf16 convention:
//! 2 bytes per floating point number, 8 bytes per int64 index, `1G = 10^9` bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamMode};
use crate::sl_layer::sparse_nnz;

const BF16_BYTES: u64 = 2;
const INT64_BYTES: u64 = 8;
const CENTI_G: u64 = 10_000_000;

/// Number counts that determine the estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    /// Stored floating point numbers: base, low-rank, sparse values, other dense trainables.
    pub bf16_param_count: u64,
    /// Stored sparse indices.
    pub int64_count: u64,
    /// Numbers carrying two Adam moments each.
    pub trainable_count: u64,
    /// Further bf16 optimizer numbers supplied by the caller (projected moments, projectors).
    pub extra_optimizer_bf16: u64,
}

impl MemoryBreakdown {
    /// Dense training: every parameter is trainable.
    pub fn dense(params: u64) -> Self {
        Self {
            bf16_param_count: params,
            trainable_count: params,
            ..Self::default()
        }
    }

    /// Stored parameters plus an optimizer state given directly as a number count.
    pub fn with_optimizer_numbers(params: u64, optimizer_numbers: u64) -> Self {
        Self {
            bf16_param_count: params,
            extra_optimizer_bf16: optimizer_numbers,
            ..Self::default()
        }
    }
}

/// Component counts of a sparse-plus-low-rank parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SltrainCounts {
    pub non_adapted: u64,
    pub low_rank: u64,
    pub sparse: u64,
}

impl SltrainCounts {
    pub fn total(&self) -> u64 {
        self.non_adapted + self.low_rank + self.sparse
    }

    pub fn breakdown(&self) -> MemoryBreakdown {
        MemoryBreakdown {
            bf16_param_count: self.total(),
            int64_count: self.sparse,
            trainable_count: self.total(),
            extra_optimizer_bf16: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
    pub total_bytes: u64,
    /// Hundredths of a G, rounded half-up.
    pub param_centi_g: u64,
    pub optimizer_centi_g: u64,
    /// Sum of the two rounded parts.
    pub total_centi_g: u64,
}

impl MemoryReport {
    pub fn param_g(&self) -> f64 {
        self.param_centi_g as f64 / 100.0
    }

    pub fn optimizer_g(&self) -> f64 {
        self.optimizer_centi_g as f64 / 100.0
    }

    pub fn total_g(&self) -> f64 {
        self.total_centi_g as f64 / 100.0
    }
}

/// `bytes / 1e9` in hundredths, rounded half-up.
pub fn centi_g(bytes: u64) -> u64 {
    (bytes + CENTI_G / 2) / CENTI_G
}

fn format_centi(c: u64) -> String {
    format!("{}.{:02}", c / 100, c % 100)
}

fn check_rank_delta(shapes: &[(usize, usize)], r: usize, delta: f64) -> Result<()> {
    if shapes.is_empty() {
        return Ok(());
    }
    let min_dim = shapes.iter().map(|&(d, p)| d.min(p)).min().unwrap_or(0);
    if r == 0 || r >= min_dim {
        return Err(Error::InvalidArgument(format!("rank {r} must satisfy 0 < r < {min_dim}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta must lie in [0, 1), got {delta}")));
    }
    Ok(())
}

/// Counts for layers `(d, p)` each parameterized with rank `r` and density `delta`.
pub fn sltrain_counts(shapes: &[(usize, usize)], non_adapted: u64, r: usize, delta: f64) -> Result<SltrainCounts> {
    check_rank_delta(shapes, r, delta)?;
    let low_rank = shapes.iter().map(|&(d, p)| (r * (d + p)) as u64).sum();
    let sparse = shapes.iter().map(|&(d, p)| sparse_nnz(d, p, delta) as u64).sum();
    Ok(SltrainCounts {
        non_adapted,
        low_rank,
        sparse,
    })
}

pub fn count_sltrain(shapes: &[(usize, usize)], non_adapted: u64, r: usize, delta: f64) -> Result<MemoryBreakdown> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(sltrain_counts(shapes, non_adapted, r, delta)?.breakdown())
}

pub fn count_low_rank(shapes: &[(usize, usize)], non_adapted: u64, r: usize) -> Result<MemoryBreakdown> {
    Ok(sltrain_counts(shapes, non_adapted, r, 0.0)?.breakdown())
}

pub fn count_full_rank(shapes: &[(usize, usize)], non_adapted: u64) -> MemoryBreakdown {
    MemoryBreakdown::dense(non_adapted + shapes.iter().map(|&(d, p)| (d * p) as u64).sum::<u64>())
}

pub fn estimate(b: &MemoryBreakdown) -> MemoryReport {
    let param_bytes = BF16_BYTES * b.bf16_param_count + INT64_BYTES * b.int64_count;
    let optimizer_bytes = 2 * BF16_BYTES * b.trainable_count + BF16_BYTES * b.extra_optimizer_bf16;
    let (pc, oc) = (centi_g(param_bytes), centi_g(optimizer_bytes));
    MemoryReport {
        param_bytes,
        optimizer_bytes,
        total_bytes: param_bytes + optimizer_bytes,
        param_centi_g: pc,
        optimizer_centi_g: oc,
        total_centi_g: pc + oc,
    }
}

/// Estimates for a list of labelled breakdowns, as aligned text and CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTable {
    pub rows: Vec<(String, MemoryBreakdown, MemoryReport)>,
}

impl MemoryTable {
    pub fn text(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {:>9}  {:>8}  {:>8}  {:>8}\n", "method", "params(M)", "Param", "Optim", "Total");
        for (label, b, r) in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>9.2}  {:>7}G  {:>7}G  {:>7}G\n",
                label,
                b.bf16_param_count as f64 / 1e6,
                format_centi(r.param_centi_g),
                format_centi(r.optimizer_centi_g),
                format_centi(r.total_centi_g),
            ));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "label,bf16_params,int64_indices,trainable,extra_optimizer,param_bytes,optimizer_bytes,param_g,optimizer_g,total_g\n",
        );
        for (label, b, r) in &self.rows {
            out.push_str(&format!(
                "{label},{},{},{},{},{},{},{},{},{}\n",
                b.bf16_param_count,
                b.int64_count,
                b.trainable_count,
                b.extra_optimizer_bf16,
                r.param_bytes,
                r.optimizer_bytes,
                format_centi(r.param_centi_g),
                format_centi(r.optimizer_centi_g),
                format_centi(r.total_centi_g),
            ));
        }
        out
    }
}

pub fn report_table(rows: &[(String, MemoryBreakdown)]) -> Result<MemoryTable> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("memory table needs at least one row".into()));
    }
    Ok(MemoryTable {
        rows: rows.iter().map(|(l, b)| (l.clone(), *b, estimate(b))).collect(),
    })
}

/// Adapted shapes and non-adapted count for a model built by this crate.
pub fn model_shapes(cfg: &ModelConfig) -> (Vec<(usize, usize)>, u64) {
    let shapes = (0..cfg.n_layers).flat_map(|_| cfg.block_projection_shapes()).collect();
    let embeddings = if cfg.tie_embeddings { 1 } else { 2 } * cfg.vocab * cfg.d_model;
    (shapes, (embeddings + (2 * cfg.n_layers + 1) * cfg.d_model) as u64)
}

/// Breakdown for a model built by this crate in its configured mode.
pub fn breakdown_for_config(cfg: &ModelConfig) -> Result<MemoryBreakdown> {
    let (shapes, non_adapted) = model_shapes(cfg);
    match cfg.mode {
        ParamMode::FullRank => Ok(count_full_rank(&shapes, non_adapted)),
        ParamMode::LowRank => count_low_rank(&shapes, non_adapted, cfg.rank),
        ParamMode::Sltrain => count_sltrain(&shapes, non_adapted, cfg.rank, cfg.delta),
    }
}

/// LLaMA-family shapes: untied embeddings and head, four `d x d` attention
/// projections and a SwiGLU MLP per block, RMSNorm weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LlamaPreset {
    pub name: &'static str,
    pub vocab: usize,
    pub d_model: usize,
    pub mlp_inner: usize,
    pub n_layers: usize,
    /// Rank used for the low-rank runs at this size.
    pub rank: usize,
}

pub const LLAMA_PRESETS: [LlamaPreset; 4] = [
    LlamaPreset { name: "60M", vocab: 32_000, d_model: 512, mlp_inner: 1376, n_layers: 8, rank: 128 },
    LlamaPreset { name: "130M", vocab: 32_000, d_model: 768, mlp_inner: 2048, n_layers: 12, rank: 256 },
    LlamaPreset { name: "350M", vocab: 32_000, d_model: 1024, mlp_inner: 2736, n_layers: 24, rank: 256 },
    LlamaPreset { name: "1B", vocab: 32_000, d_model: 2048, mlp_inner: 5461, n_layers: 24, rank: 512 },
];

impl LlamaPreset {
    pub fn by_name(name: &str) -> Option<Self> {
        LLAMA_PRESETS.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
    }

    pub fn adapted_shapes(&self) -> Vec<(usize, usize)> {
        let (d, m) = (self.d_model, self.mlp_inner);
        (0..self.n_layers)
            .flat_map(|_| [(d, d), (d, d), (d, d), (d, d), (m, d), (m, d), (d, m)])
            .collect()
    }

    /// Embedding, head and every RMSNorm weight.
    pub fn non_adapted(&self) -> u64 {
        (2 * self.vocab * self.d_model + (2 * self.n_layers + 1) * self.d_model) as u64
    }

    pub fn sltrain_counts(&self, r: usize, delta: f64) -> Result<SltrainCounts> {
        sltrain_counts(&self.adapted_shapes(), self.non_adapted(), r, delta)
    }

    pub fn full_rank(&self) -> MemoryBreakdown {
        count_full_rank(&self.adapted_shapes(), self.non_adapted())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_layer_counts() {
        let c = sltrain_counts(&[(512, 512)], 0, 128, 0.03).unwrap();
        assert_eq!(c.low_rank, 131_072);
        assert_eq!(c.sparse, 7_864);
        let b = count_sltrain(&[(512, 512)], 0, 128, 0.03).unwrap();
        assert_eq!(b.int64_count, 7_864);
        assert_eq!(b.bf16_param_count, 131_072 + 7_864);
        assert_eq!(b.trainable_count, b.bf16_param_count);
    }

    #[test]
    fn vanishing_density_is_low_rank() {
        let shapes = [(64, 48), (48, 64)];
        let s = count_sltrain(&shapes, 100, 8, 1e-6).unwrap();
        assert_eq!(s, count_low_rank(&shapes, 100, 8).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        assert!(count_sltrain(&[(8, 8)], 0, 8, 0.1).is_err());
        assert!(count_sltrain(&[(8, 8)], 0, 2, 0.0).is_err());
        assert!(count_sltrain(&[(8, 8)], 0, 2, 1.0).is_err());
        assert!(report_table(&[]).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(centi_g(5_000_000), 1);
        assert_eq!(centi_g(4_999_999), 0);
        assert_eq!(centi_g(115_000_000), 12);
    }

    #[test]
    fn sixty_m_sltrain_estimate() {
        let b = SltrainCounts {
            non_adapted: 32_780_000,
            low_rank: 10_000_000,
            sparse: 760_000,
        }
        .breakdown();
        let r = estimate(&b);
        assert_eq!((r.param_centi_g, r.optimizer_centi_g, r.total_centi_g), (9, 17, 26));
        assert_eq!(r.total_bytes, r.param_bytes + r.optimizer_bytes);
    }

    #[test]
    fn table_output() {
        let t = report_table(&[("full".into(), MemoryBreakdown::dense(1_339_080_000))]).unwrap();
        assert!(t.text().contains("2.68G") && t.text().contains("5.36G"));
        let csv = t.csv();
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("full,1339080000,0,1339080000,0,"));
        assert!(line.ends_with(",2.68,5.36,8.04"));
    }

    #[test]
    fn preset_counts() {
        let p = LlamaPreset::by_name("60m").unwrap();
        let c = p.sltrain_counts(128, 0.03).unwrap();
        assert_eq!(c.non_adapted, 32_776_704);
        assert_eq!(c.low_rank, 9_994_240);
        assert_eq!(c.sparse, 758_888);
    }

    #[test]
    fn config_breakdown_matches_model() {
        use crate::model::Model;
        for mode in [ParamMode::Sltrain, ParamMode::LowRank, ParamMode::FullRank] {
            let mut cfg = ModelConfig::micro(mode);
            cfg.seq_len = 8;
            let m = Model::init(&cfg).unwrap();
            let b = breakdown_for_config(&cfg).unwrap();
            assert_eq!(b.trainable_count as usize, m.trainable_count());
        }
    }

    proptest! {
        #[test]
        fn monotone_in_rank_and_density(r in 1usize..30, delta in 0.01f64..0.5, bump in 0.05f64..0.4) {
            let shapes = [(64, 64), (96, 64), (64, 96)];
            let base = estimate(&count_sltrain(&shapes, 10, r, delta).unwrap());
            let more_r = estimate(&count_sltrain(&shapes, 10, r + 1, delta).unwrap());
            prop_assert!(more_r.param_bytes > base.param_bytes && more_r.optimizer_bytes > base.optimizer_bytes);
            let d2 = (delta + bump).min(0.99);
            let more_d = estimate(&count_sltrain(&shapes, 10, r, d2).unwrap());
            let grew = sltrain_counts(&shapes, 10, r, d2).unwrap().sparse > sltrain_counts(&shapes, 10, r, delta).unwrap().sparse;
            prop_assert!(!grew || (more_d.param_bytes > base.param_bytes && more_d.optimizer_bytes > base.optimizer_bytes));
        }

        #[test]
        fn sparse_overhead_is_ten_bytes_per_entry(r in 1usize..30, delta in 0.001f64..0.9) {
            let shapes = [(64, 64), (172, 64), (64, 172)];
            let sl = estimate(&count_sltrain(&shapes, 7, r, delta).unwrap());
            let lr = estimate(&count_low_rank(&shapes, 7, r).unwrap());
            let nnz: u64 = shapes.iter().map(|&(d, p)| ((delta * (d * p) as f64 + 1e-9).floor()) as u64).sum();
            prop_assert_eq!(sl.param_bytes - lr.param_bytes, 10 * nnz);
        }
    }
}
