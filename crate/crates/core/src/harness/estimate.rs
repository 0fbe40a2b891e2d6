use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mem_estimator::{
    breakdown_for_config, count_full_rank, count_low_rank, count_sltrain, report_table, LlamaPreset, MemoryBreakdown,
    MemoryTable, SltrainCounts,
};
use crate::model::ModelConfig;

/// Explicit number counts for one table row.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub label: String,
    /// Sparse-plus-low-rank component counts; sets params, indices and trainables.
    #[serde(default)]
    pub components: Option<SltrainCounts>,
    #[serde(default)]
    pub bf16_params: u64,
    #[serde(default)]
    pub int64_indices: u64,
    #[serde(default)]
    pub trainable: u64,
    #[serde(default)]
    pub extra_optimizer: u64,
}

impl RowSpec {
    fn breakdown(&self) -> MemoryBreakdown {
        match self.components {
            Some(c) => c.breakdown(),
            None => MemoryBreakdown {
                bf16_param_count: self.bf16_params,
                int64_count: self.int64_indices,
                trainable_count: self.trainable,
                extra_optimizer_bf16: self.extra_optimizer,
            },
        }
    }
}

/// Adapted-layer list with its non-adapted count.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub adapted: Vec<[usize; 2]>,
    pub non_adapted: u64,
    pub rank: usize,
    pub delta: f64,
}

/// Input of `estimate-mem`: any mix of a model config, a named LLaMA preset,
/// an explicit shape list and explicit rows.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub preset: Option<PresetSpec>,
    #[serde(default)]
    pub shapes: Option<ShapeSpec>,
    #[serde(default)]
    pub rows: Vec<RowSpec>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub name: String,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.03
}

fn shape_rows(prefix: &str, shapes: &[(usize, usize)], non_adapted: u64, r: usize, delta: f64) -> Result<Vec<(String, MemoryBreakdown)>> {
    Ok(vec![
        (format!("{prefix}full_rank"), count_full_rank(shapes, non_adapted)),
        (format!("{prefix}low_rank"), count_low_rank(shapes, non_adapted, r)?),
        (format!("{prefix}sltrain"), count_sltrain(shapes, non_adapted, r, delta)?),
    ])
}

impl EstimateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn table(&self) -> Result<MemoryTable> {
        let mut rows = Vec::new();
        if let Some(m) = &self.model {
            m.validate()?;
            rows.push((format!("model_{}", m.mode.as_str()), breakdown_for_config(m)?));
        }
        if let Some(p) = &self.preset {
            let preset = LlamaPreset::by_name(&p.name)
                .ok_or_else(|| Error::Config(format!("unknown preset `{}`", p.name)))?;
            let r = p.rank.unwrap_or(preset.rank);
            rows.extend(shape_rows(&format!("{}_", preset.name), &preset.adapted_shapes(), preset.non_adapted(), r, p.delta)?);
        }
        if let Some(s) = &self.shapes {
            let shapes: Vec<(usize, usize)> = s.adapted.iter().map(|&[d, p]| (d, p)).collect();
            rows.extend(shape_rows("", &shapes, s.non_adapted, s.rank, s.delta)?);
        }
        rows.extend(self.rows.iter().map(|r| (r.label.clone(), r.breakdown())));
        report_table(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_rows_and_presets() {
        let cfg = EstimateConfig::from_toml(
            r#"
[preset]
name = "130M"

[[rows]]
label = "SLTrain"
components = { non_adapted = 32780000, low_rank = 10000000, sparse = 760000 }

[[rows]]
label = "GaLore"
bf16_params = 58200000
extra_optimizer = 81870000
"#,
        )
        .unwrap();
        let t = cfg.table().unwrap();
        let get = |l: &str| t.rows.iter().find(|r| r.0 == l).unwrap().2;
        let sl = get("SLTrain");
        assert_eq!((sl.param_centi_g, sl.optimizer_centi_g, sl.total_centi_g), (9, 17, 26));
        let g = get("GaLore");
        assert_eq!((g.param_centi_g, g.optimizer_centi_g), (12, 16));
        let p = get("130M_sltrain");
        assert_eq!((p.param_centi_g, p.optimizer_centi_g), (21, 39));
    }

    #[test]
    fn empty_config_is_an_error() {
        assert!(EstimateConfig::default().table().is_err());
        assert!(EstimateConfig::from_toml("bogus = 1").is_err());
    }
}
