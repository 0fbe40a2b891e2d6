use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the attention and MLP projections are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    /// `W = (alpha/r) B A ⊕_I V`.
    #[serde(alias = "sl_train", alias = "sltrain")]
    Sltrain,
    /// `W = (alpha/r) B A`.
    LowRank,
    /// Dense `W`.
    FullRank,
}

impl ParamMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamMode::Sltrain => "sltrain",
            ParamMode::LowRank => "low_rank",
            ParamMode::FullRank => "full_rank",
        }
    }
}

impl std::str::FromStr for ParamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sltrain" | "sl_train" => Ok(ParamMode::Sltrain),
            "low_rank" => Ok(ParamMode::LowRank),
            "full_rank" => Ok(ParamMode::FullRank),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

/// Decoder-only transformer shape and parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// SwiGLU inner width; defaults to `floor(8 d / 3)` rounded up to a multiple of 4.
    #[serde(default)]
    pub mlp_inner: Option<usize>,
    /// Maximum number of input positions per sequence.
    pub seq_len: usize,
    pub rank: usize,
    pub delta: f64,
    pub alpha: f64,
    pub mode: ParamMode,
    #[serde(default)]
    pub seed: u64,
    /// Seed for sparse supports and values; falls back to `seed`.
    #[serde(default)]
    pub support_seed: Option<u64>,
    #[serde(default = "default_true")]
    pub rope: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Small byte-level model used by tests and the desk-scale experiments.
    pub fn micro(mode: ParamMode) -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_inner: None,
            seq_len: 64,
            rank: 16,
            delta: 0.03,
            alpha: 32.0,
            mode,
            seed: 0,
            support_seed: None,
            rope: true,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            tie_embeddings: false,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.mlp_inner.unwrap_or_else(|| default_inner(self.d_model))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.seq_len == 0 {
            return bad("vocab, d_model, n_layers and seq_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.rope && !self.head_dim().is_multiple_of(2) {
            return bad(format!("rotary embedding needs an even head dim, got {}", self.head_dim()));
        }
        if self.inner_dim() == 0 {
            return bad("mlp_inner must be positive".into());
        }
        if self.mode != ParamMode::FullRank {
            let min_dim = self.d_model.min(self.inner_dim());
            if self.rank == 0 || self.rank >= min_dim {
                return bad(format!("rank {} must satisfy 0 < r < {min_dim}", self.rank));
            }
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return bad(format!("alpha must be positive, got {}", self.alpha));
            }
        }
        if self.mode == ParamMode::Sltrain && !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return bad("norm_eps and rope_base must be positive".into());
        }
        Ok(())
    }

    /// `(out, in)` shapes of the seven projections in one block, in
    /// `q, k, v, o, gate, up, down` order.
    pub fn block_projection_shapes(&self) -> [(usize, usize); 7] {
        let (d, m) = (self.d_model, self.inner_dim());
        [(d, d), (d, d), (d, d), (d, d), (m, d), (m, d), (d, m)]
    }
}

/// `floor(8 d / 3)` rounded up to a multiple of 4.
pub fn default_inner(d: usize) -> usize {
    (8 * d / 3).div_ceil(4) * 4
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_default() {
        assert_eq!(default_inner(64), 172);
        assert_eq!(default_inner(8), 24);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::micro(ParamMode::Sltrain);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::micro(ParamMode::LowRank);
        c.rank = 64;
        assert!(c.validate().is_err());
        c.mode = ParamMode::FullRank;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::micro(ParamMode::Sltrain);
        c.delta = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [ParamMode::Sltrain, ParamMode::LowRank, ParamMode::FullRank] {
            assert_eq!(m.as_str().parse::<ParamMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }
}
