//! Spectrum and residual reports over the projections of a checkpoint.

use std::path::Path;

use glob::Pattern;

use crate::analysis::{
    best_rank_r, decompose_spectrum, decomposition_csv, residual_cdf_csv, residual_stats, spectrum, spectrum_csv,
    ResidualStats, SpectrumReport, DEFAULT_QUANTILES,
};
use crate::error::{Error, Result};
use crate::model::{Model, Projection};

/// CDF points written per matrix.
pub const CDF_POINTS: usize = 200;

#[derive(Debug, Default)]
pub struct AnalysisOutput {
    /// Spectrum of each selected (densified) weight.
    pub spectra: Vec<(String, SpectrumReport)>,
    /// Low-rank and sparse contributions, for factored layers only.
    pub decompositions: Vec<(String, SpectrumReport)>,
    /// Magnitudes of `W - L0` with `L0` the best rank-`rank` approximation.
    pub residuals: Vec<(String, ResidualStats)>,
}

impl AnalysisOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("spectrum.csv", spectrum_csv(&self.spectra)),
            ("decomposition.csv", decomposition_csv(&self.decompositions)),
            ("residual_cdf.csv", residual_cdf_csv(&self.residuals, CDF_POINTS)),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Analyzes projections whose name matches any of `patterns` (all when empty).
pub fn analyze_model(model: &Model, patterns: &[String], rank: usize) -> Result<AnalysisOutput> {
    let pats = patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| Error::InvalidArgument(format!("bad pattern `{p}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut out = AnalysisOutput::default();
    for (name, proj) in model.projections() {
        if !pats.is_empty() && !pats.iter().any(|p| p.matches(&name)) {
            continue;
        }
        let w = proj.weight();
        out.spectra.push((name.clone(), spectrum(&w)?));
        if let Projection::Factored(l) = proj {
            let lr = l.low_rank();
            out.decompositions
                .push((name.clone(), decompose_spectrum(lr.b(), lr.a(), lr.scale(), l.sparse())?));
        }
        let r = rank.min(w.rows().min(w.cols()));
        let residual = w.sub(&best_rank_r(&w, r)?)?;
        out.residuals.push((name, residual_stats(&residual, &DEFAULT_QUANTILES)?));
    }
    if out.spectra.is_empty() {
        return Err(Error::InvalidArgument("no projection matches the selection".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamMode};

    #[test]
    fn selects_by_glob_and_writes_csvs() {
        let mut cfg = ModelConfig::micro(ParamMode::Sltrain);
        cfg.n_layers = 1;
        cfg.rank = 4;
        let m = Model::init(&cfg).unwrap();
        let out = analyze_model(&m, &["blocks.*.attn.*".into()], 4).unwrap();
        assert_eq!(out.spectra.len(), 4);
        assert_eq!(out.decompositions.len(), 4);
        for (_, rep) in &out.decompositions {
            assert!(rep.additivity_error().unwrap() <= 1e-10);
        }
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        let spec = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
        assert!(spec.starts_with("matrix,index,sigma\nblocks.0.attn.q,0,"));
        assert!(analyze_model(&m, &["nothing".into()], 4).is_err());
        assert!(analyze_model(&m, &["[".into()], 4).is_err());
    }

    #[test]
    fn dense_models_have_no_decomposition() {
        let mut cfg = ModelConfig::micro(ParamMode::FullRank);
        cfg.n_layers = 1;
        let m = Model::init(&cfg).unwrap();
        let out = analyze_model(&m, &[], 8).unwrap();
        assert_eq!(out.spectra.len(), 7);
        assert!(out.decompositions.is_empty());
    }
}
