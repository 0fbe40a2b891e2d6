use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Build version, `<crate version>+<git describe>` when built from a checkout.
pub const VERSION: &str = env!("SLTRAIN_VERSION");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
}

/// Training rows plus evaluation rows, prefixed by a reproducibility stanza.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub stanza: Vec<(String, String)>,
    rows: Vec<MetricsRow>,
    evals: Vec<EvalRow>,
}

pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl MetricsLog {
    pub fn new(canonical_config: &str, seed: u64) -> Self {
        Self {
            stanza: vec![
                ("config_sha256".into(), config_hash(canonical_config)),
                ("seed".into(), seed.to_string()),
                ("version".into(), VERSION.into()),
                ("batching".into(), "cyclic (windows repeat across passes)".into()),
            ],
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "metrics step {} does not follow {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_eval(&mut self, row: EvalRow) {
        self.evals.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn evals(&self) -> &[EvalRow] {
        &self.evals
    }

    fn header(&self) -> String {
        self.stanza.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }

    /// `step,loss,lr,tokens,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("step,loss,lr,tokens,seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{},{:.3}", r.step, r.loss, r.lr, r.tokens, r.seconds);
        }
        out
    }

    /// `step,split,loss,ppl`.
    pub fn eval_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("step,split,loss,ppl\n");
        for e in &self.evals {
            let _ = writeln!(out, "{},{},{:.17e},{:.17e}", e.step, e.split, e.loss, e.ppl);
        }
        out
    }

    /// Writes `metrics.csv` and `eval.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("metrics.csv");
        std::fs::write(&m, self.to_csv()).map_err(|e| Error::io(&m, e))?;
        let e = dir.join("eval.csv");
        std::fs::write(&e, self.eval_csv()).map_err(|err| Error::io(&e, err))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::new("{}", 1);
        let row = |step| MetricsRow {
            step,
            loss: 1.0,
            lr: 0.1,
            tokens: 10,
            seconds: 0.0,
        };
        log.push(row(1)).unwrap();
        assert!(log.push(row(1)).is_err());
        log.push(row(3)).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with("# config_sha256: "));
        assert!(csv.contains("# seed: 1\n"));
        assert!(csv.contains("step,loss,lr,tokens,seconds\n1,"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
