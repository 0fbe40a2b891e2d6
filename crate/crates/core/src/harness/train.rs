use std::path::Path;
use std::time::Instant;

use super::checkpoint::{capture, restore, Checkpoint};
use super::config::TrainConfig;
use super::corpus::{ingest, split_tail, Batcher};
use super::metrics::{EvalRow, MetricsLog, MetricsRow};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, LrSchedule};

/// Training and validation token streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub vocab: usize,
}

impl DataSplit {
    /// Holds out the tail of a single stream.
    pub fn from_stream(tokens: &[u32], vocab: usize, val_fraction: f64) -> Result<Self> {
        let (t, v) = split_tail(tokens, val_fraction)?;
        Ok(Self {
            train: t.to_vec(),
            val: v.to_vec(),
            vocab,
        })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let train = ingest(&cfg.data.train, cfg.data.format)?;
        match &cfg.data.val {
            Some(p) => {
                let val = ingest(p, cfg.data.format)?;
                if val.vocab != train.vocab {
                    return Err(Error::Config(format!(
                        "validation vocab {} differs from training vocab {}",
                        val.vocab, train.vocab
                    )));
                }
                Ok(Self {
                    train: train.tokens,
                    val: val.tokens,
                    vocab: train.vocab,
                })
            }
            None => Self::from_stream(&train.tokens, train.vocab, cfg.data.val_fraction),
        }
    }
}

fn check_vocab(model_vocab: usize, data_vocab: usize) -> Result<()> {
    if data_vocab > model_vocab {
        return Err(Error::Config(format!(
            "corpus vocab {data_vocab} exceeds model vocab {model_vocab}"
        )));
    }
    Ok(())
}

/// Single-threaded training loop state.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: Adam,
    schedule: LrSchedule,
    batcher: Batcher,
    data: DataSplit,
    log: MetricsLog,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: DataSplit) -> Result<Self> {
        let model = Model::init(&cfg.model)?;
        let opt = Adam::new(cfg.optim);
        Self::from_state(cfg, model, opt, data)
    }

    /// Starts from an existing model and optimizer (resume, fine-tuning, ablations).
    pub fn from_state(cfg: TrainConfig, model: Model, opt: Adam, data: DataSplit) -> Result<Self> {
        cfg.validate()?;
        check_vocab(model.config().vocab, data.vocab)?;
        let schedule = cfg.lr_schedule()?;
        let batcher = Batcher::new(data.train.len(), model.config().seq_len, cfg.batch_size, cfg.data_seed)?;
        let log = MetricsLog::new(&cfg.canonical_json(), cfg.model.seed);
        Ok(Self {
            cfg,
            model,
            opt,
            schedule,
            batcher,
            data,
            log,
            started: Instant::now(),
        })
    }

    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint, data: DataSplit) -> Result<Self> {
        let (model, opt, _) = restore(ckpt)?;
        let opt = Adam::restore(cfg.optim, opt.step_count(), opt.moments().clone());
        Self::from_state(cfg, model, opt, data)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn global_step(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        capture(&self.model, Some(&self.opt), Some(&self.cfg))
    }

    /// One optimizer step; returns the training loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let index = self.opt.step_count();
        let batch = self.batcher.batch_at(&self.data.train, index)?;
        let (out, cache) = self.model.forward_loss(&batch).map_err(|e| match e {
            Error::NonFinite(tensor) => Error::NumericalFailure { step: index + 1, tensor },
            e => e,
        })?;
        if !out.loss.is_finite() {
            return Err(Error::NumericalFailure {
                step: index + 1,
                tensor: "loss".into(),
            });
        }
        let grads = self.model.backward(&cache, 1.0)?;
        drop(cache);
        let freeze = self.cfg.freeze;
        let mut names = Vec::new();
        self.model.visit_params(|n, kind, _| {
            if !freeze.is_frozen(kind) {
                names.push(n.to_string());
            }
        });
        if let Some(bad) = names.iter().find(|n| grads[n.as_str()].iter().any(|g| !g.is_finite())) {
            return Err(Error::NumericalFailure {
                step: index + 1,
                tensor: bad.clone(),
            });
        }
        let clip = self.opt.clip_factor(names.iter().map(|n| grads[n.as_str()].as_slice()));
        let t = self.opt.begin_step();
        let lr = self.schedule.lr_at(t);
        let opt = &mut self.opt;
        let mut scaled = Vec::new();
        let mut bad_param = None;
        self.model.visit_params_mut(|name, kind, param| {
            if freeze.is_frozen(kind) {
                return Ok(());
            }
            let g = &grads[name];
            let g = if clip == 1.0 {
                g.as_slice()
            } else {
                scaled.clear();
                scaled.extend(g.iter().map(|v| v * clip));
                scaled.as_slice()
            };
            opt.update(name, param, g, lr)?;
            if bad_param.is_none() && param.iter().any(|v| !v.is_finite()) {
                bad_param = Some(name.to_string());
            }
            Ok(())
        })?;
        if let Some(tensor) = bad_param {
            return Err(Error::NumericalFailure { step: t, tensor });
        }
        let tokens = t * (self.cfg.batch_size * self.model.config().seq_len) as u64;
        self.log.push(MetricsRow {
            step: t,
            loss: out.loss,
            lr,
            tokens,
            seconds: self.started.elapsed().as_secs_f64(),
        })?;
        Ok(out.loss)
    }

    fn eval_stream(&self) -> &[u32] {
        let v = &self.data.val;
        match self.cfg.eval_max_tokens {
            Some(n) if n >= 2 && n < v.len() => &v[..n],
            _ => v,
        }
    }

    /// Validation `(mean loss, perplexity)`.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (sum, count) = self.model.stream_loss(self.eval_stream())?;
        let loss = sum / count as f64;
        Ok((loss, loss.exp()))
    }

    fn eval_and_log(&mut self) -> Result<f64> {
        let (loss, ppl) = self.evaluate()?;
        self.log.push_eval(EvalRow {
            step: self.global_step(),
            split: "val".into(),
            loss,
            ppl,
        });
        Ok(ppl)
    }

    fn save_checkpoint(&self) -> Result<()> {
        if let Some(p) = &self.cfg.checkpoint {
            self.checkpoint().save(p)?;
        }
        Ok(())
    }

    /// Runs until the global step reaches `target` without final evaluation.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.global_step() < target {
            self.step()?;
            let s = self.global_step();
            if self.cfg.eval_interval > 0 && s.is_multiple_of(self.cfg.eval_interval) && s < self.cfg.steps {
                self.eval_and_log()?;
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Trains to the configured step count, evaluates, checkpoints and writes
    /// metrics; returns the final validation perplexity.
    pub fn run(&mut self) -> Result<f64> {
        self.run_until(self.cfg.steps)?;
        let ppl = self.eval_and_log()?;
        self.save_checkpoint()?;
        if let Some(dir) = &self.cfg.out_dir {
            self.log.write(dir)?;
        }
        Ok(ppl)
    }
}

/// Perplexity of a saved checkpoint over a token stream.
pub fn evaluate_checkpoint(path: &Path, stream: &[u32], vocab: usize) -> Result<f64> {
    let (model, _, _) = restore(&Checkpoint::load(path)?)?;
    if vocab != model.config().vocab {
        return Err(Error::Config(format!(
            "corpus vocab {vocab} does not match model vocab {}",
            model.config().vocab
        )));
    }
    model.perplexity(stream)
}

/// Builds the adapter model described by `cfg.finetune` from its pretrained checkpoint.
pub fn finetune_model(cfg: &TrainConfig) -> Result<Model> {
    let ft = cfg
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("finetune section missing".into()))?;
    let (base, _, _) = restore(&Checkpoint::load(&ft.from)?)?;
    base.into_adapter(ft.rank, ft.delta, ft.alpha, ft.seed)
}
