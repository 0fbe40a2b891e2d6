//! Pretrain dense, extract best rank-r parts, then compare pruning the
//! residual with training only sparse values on top of the frozen low-rank part.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{FreezeFlags, TrainConfig};
use super::train::{DataSplit, Trainer};
use crate::analysis::{best_rank_r_factors, prune_top};
use crate::error::{Error, Result};
use crate::kernels::{gather, matmul, sample_support, IndexSet, SeededRng};
use crate::model::{Model, ParamMode, Projection};
use crate::optim::Adam;
use crate::sl_layer::{sparse_nnz, LowRankFactor, SlLinear, SparseFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSettings {
    pub rank: usize,
    pub delta: f64,
    pub alpha: f64,
    /// Steps of sparse-only training per run.
    pub sparse_steps: u64,
    pub sparse_lr: f64,
    /// Runs per sparse-training variant (and random pruning draws).
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub support_seed: u64,
}

fn default_runs() -> usize {
    5
}

/// Full ablation configuration: the dense pretraining run plus settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub pretrain: TrainConfig,
    pub ablate: AblateSettings,
}

impl AblateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.pretrain.model.mode != ParamMode::FullRank {
            return Err(Error::Config("ablation pretraining must be full_rank".into()));
        }
        if cfg.ablate.runs == 0 || cfg.ablate.sparse_steps == 0 {
            return Err(Error::Config("ablate.runs and ablate.sparse_steps must be positive".into()));
        }
        cfg.pretrain.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub full_rank: f64,
    pub low_rank: f64,
    pub top_pruning: f64,
    /// One value per random support.
    pub random_pruning: Vec<f64>,
    /// One value per run (data order varies).
    pub top_training: Vec<f64>,
    /// One value per random support.
    pub random_training: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblateReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("full_rank", self.full_rank),
            ("low_rank_l0", self.low_rank),
            ("l0_top_pruning", self.top_pruning),
            ("l0_random_pruning", mean(&self.random_pruning)),
            ("l0_sparse_training_top", mean(&self.top_training)),
            ("l0_sparse_training_random", mean(&self.random_training)),
        ]
    }

    pub fn text(&self) -> String {
        let mut out = String::from("variant                      PPL\n");
        for (name, ppl) in self.rows() {
            let _ = writeln!(out, "{name:<28} {ppl:.4}");
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,ppl\n");
        for (name, ppl) in self.rows() {
            let _ = writeln!(out, "{name},{ppl:e}");
        }
        out
    }

    /// Top pruning no worse than random pruning, both pruning variants worse
    /// than both training variants.
    pub fn ordering_holds(&self) -> bool {
        let (rp, tt, rt) = (mean(&self.random_pruning), mean(&self.top_training), mean(&self.random_training));
        self.top_pruning <= rp && self.top_pruning.min(rp) > tt.max(rt)
    }
}

/// Per-projection low-rank factors and residual of a dense model.
pub struct Decomposition {
    dense: Model,
    rank: usize,
    delta: f64,
    alpha: f64,
    /// `(B, A, residual)` per `(layer, slot)` in storage order.
    parts: Vec<(crate::kernels::Matrix, crate::kernels::Matrix, crate::kernels::Matrix)>,
}

impl Decomposition {
    pub fn new(dense: &Model, rank: usize, delta: f64, alpha: f64) -> Result<Self> {
        let scale = alpha / rank as f64;
        let mut parts = Vec::new();
        for b in &dense.blocks {
            for p in &b.proj {
                let w = match p {
                    Projection::Dense(w) => w,
                    Projection::Factored(_) => {
                        return Err(Error::InvalidArgument("decomposition needs dense projections".into()))
                    }
                };
                let (bm, am) = best_rank_r_factors(w, rank, scale)?;
                let mut low = matmul(&bm, &am)?;
                low.scale_in_place(scale);
                let residual = w.sub(&low)?;
                parts.push((bm, am, residual));
            }
        }
        Ok(Self {
            dense: dense.clone(),
            rank,
            delta,
            alpha,
            parts,
        })
    }

    pub fn nnz(&self, index: usize) -> usize {
        let (o, i) = self.parts[index].2.shape();
        sparse_nnz(o, i, self.delta)
    }

    pub fn top_supports(&self) -> Result<Vec<IndexSet>> {
        (0..self.parts.len())
            .map(|i| Ok(prune_top(&self.parts[i].2, self.nnz(i))?.support().clone()))
            .collect()
    }

    pub fn random_supports(&self, seed: u64) -> Result<Vec<IndexSet>> {
        (0..self.parts.len())
            .map(|i| {
                let (o, p) = self.parts[i].2.shape();
                sample_support(o, p, self.nnz(i), &mut SeededRng::with_stream(seed, i as u64))
            })
            .collect()
    }

    pub fn empty_supports(&self) -> Vec<IndexSet> {
        self.parts
            .iter()
            .map(|(_, _, r)| IndexSet::empty(r.rows(), r.cols()))
            .collect()
    }

    /// `L0 + S` where `S` holds the residual at each support.
    pub fn model_with(&self, supports: &[IndexSet]) -> Result<Model> {
        let mut cfg = self.dense.config().clone();
        cfg.mode = ParamMode::Sltrain;
        cfg.rank = self.rank;
        cfg.delta = self.delta;
        cfg.alpha = self.alpha;
        let mut blocks = self.dense.blocks.clone();
        let mut idx = 0;
        for b in &mut blocks {
            for p in b.proj.iter_mut() {
                let (bm, am, residual) = &self.parts[idx];
                let support = supports[idx].clone();
                let values = gather(residual, &support)?;
                let delta = if support.is_empty() { 0.0 } else { self.delta };
                let low = LowRankFactor::new(bm.clone(), am.clone(), self.alpha)?;
                *p = Projection::Factored(SlLinear::from_parts(low, SparseFactor::new(support, values, delta)?, None)?);
                idx += 1;
            }
        }
        Model::from_parts(cfg, self.dense.embed.clone(), blocks, self.dense.final_norm.clone(), self.dense.head.clone())
    }
}

fn eval_ppl(model: &Model, cfg: &TrainConfig, data: &DataSplit) -> Result<f64> {
    let v = &data.val;
    let stream = match cfg.eval_max_tokens {
        Some(n) if n >= 2 && n < v.len() => &v[..n],
        _ => &v[..],
    };
    model.perplexity(stream)
}

fn sparse_training_config(cfg: &AblateConfig, run: usize) -> TrainConfig {
    let mut t = cfg.pretrain.clone();
    t.steps = cfg.ablate.sparse_steps;
    t.schedule.peak_lr = cfg.ablate.sparse_lr;
    t.schedule.warmup_steps = None;
    t.freeze = FreezeFlags::sparse_only();
    t.eval_interval = 0;
    t.checkpoint = None;
    t.out_dir = None;
    t.data_seed = cfg.pretrain.data_seed.wrapping_add(1 + run as u64);
    t
}

/// Trains only the sparse values of `model`; returns validation perplexity.
pub fn train_sparse(model: Model, cfg: &AblateConfig, run: usize, data: &DataSplit) -> Result<f64> {
    let t = sparse_training_config(cfg, run);
    let mut trainer = Trainer::from_state(t.clone(), model, Adam::new(t.optim), data.clone())?;
    trainer.run_until(t.steps)?;
    eval_ppl(trainer.model(), &t, data)
}

/// Runs the ablation on an already pretrained dense model.
pub fn ablate_pretrained(dense: &Model, cfg: &AblateConfig, data: &DataSplit) -> Result<AblateReport> {
    let s = &cfg.ablate;
    let dec = Decomposition::new(dense, s.rank, s.delta, s.alpha)?;
    let full_rank = eval_ppl(dense, &cfg.pretrain, data)?;
    let low_rank = eval_ppl(&dec.model_with(&dec.empty_supports())?, &cfg.pretrain, data)?;
    let top = dec.top_supports()?;
    let top_model = dec.model_with(&top)?;
    let top_pruning = eval_ppl(&top_model, &cfg.pretrain, data)?;
    let mut random_pruning = Vec::new();
    let mut random_training = Vec::new();
    let mut top_training = Vec::new();
    for run in 0..s.runs {
        let rs = dec.random_supports(s.support_seed.wrapping_add(run as u64))?;
        let rm = dec.model_with(&rs)?;
        random_pruning.push(eval_ppl(&rm, &cfg.pretrain, data)?);
        random_training.push(train_sparse(rm, cfg, run, data)?);
        top_training.push(train_sparse(top_model.clone(), cfg, run, data)?);
    }
    Ok(AblateReport {
        full_rank,
        low_rank,
        top_pruning,
        random_pruning,
        top_training,
        random_training,
    })
}

/// Pretrains the dense model, then runs the ablation.
pub fn run_ablation(cfg: &AblateConfig, data: &DataSplit) -> Result<(Model, AblateReport)> {
    let mut pre = Trainer::new(cfg.pretrain.clone(), data.clone())?;
    pre.run()?;
    let dense = pre.into_model();
    let report = ablate_pretrained(&dense, cfg, data)?;
    Ok((dense, report))
}
