//! Checkpoint container.
//!
//! Layout (little-endian): magic `SLTCKPT\0`, u32 version, u64 config length,
//! config JSON, u64 global step, u64 tensor count, then per tensor sorted by
//! name: u32 name length, name, u8 dtype, u8 rank, u64 dims, u64 payload
//! length, payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kernels::{IndexSet, Matrix};
use crate::model::{Block, Model, ModelConfig, Projection};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::sl_layer::{LowRankFactor, SlLinear, SparseFactor};

pub const MAGIC: [u8; 8] = *b"SLTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    I64 = 2,
}

impl DType {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::I64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self {
            dtype: DType::F64,
            shape: shape.iter().map(|&d| d as u64).collect(),
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self {
            dtype: DType::F32,
            shape: shape.iter().map(|&d| d as u64).collect(),
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_i64(shape: &[usize], data: &[i64]) -> Self {
        Self {
            dtype: DType::I64,
            shape: shape.iter().map(|&d| d as u64).collect(),
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product::<u64>() as usize
    }

    /// Values widened to f64 (f32 and f64 records only).
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()),
            DType::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()),
            DType::I64 => Err(Error::Format("expected a floating point tensor".into())),
        }
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        if self.dtype != DType::I64 {
            return Err(Error::Format("expected an int64 tensor".into()));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub step: u64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(t.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let n = r.len()?;
        let config_json = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let step = r.u64()?;
        let count = r.len()?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if last.as_deref().is_some_and(|l| l >= name.as_str()) {
                return Err(Error::Format(format!("tensor `{name}` out of order or duplicated")));
            }
            let dtype = DType::from_u8(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let len = r.len()?;
            let expect = shape.iter().try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d));
            if expect != Some(len as u64) {
                return Err(Error::Format(format!("tensor `{name}` payload length disagrees with its shape")));
            }
            let payload = r.take(len)?.to_vec();
            last = Some(name.clone());
            tensors.insert(name, TensorRecord { dtype, shape, payload });
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_json,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 {
            return Err(Error::Format(format!("tensor `{name}` is not a matrix")));
        }
        Matrix::new(t.shape[0] as usize, t.shape[1] as usize, t.to_f64()?)
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        self.tensor(name)?.to_f64()
    }
}

/// Configuration embedded in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Snapshot of model parameters, optimizer moments and the global step.
pub fn capture(model: &Model, opt: Option<&Adam>, train: Option<&TrainConfig>) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    let mut put = |name: String, rec: TensorRecord| {
        tensors.insert(name, rec);
    };
    let cfg = model.config();
    put("embed".into(), TensorRecord::from_f64(&[cfg.vocab, cfg.d_model], model.embed.as_slice()));
    put("final_norm".into(), TensorRecord::from_f64(&[cfg.d_model], &model.final_norm));
    if let Some(h) = &model.head {
        put("head".into(), TensorRecord::from_f64(&[h.rows(), h.cols()], h.as_slice()));
    }
    for (li, b) in model.blocks.iter().enumerate() {
        put(format!("blocks.{li}.attn_norm"), TensorRecord::from_f64(&[b.attn_norm.len()], &b.attn_norm));
        put(format!("blocks.{li}.mlp_norm"), TensorRecord::from_f64(&[b.mlp_norm.len()], &b.mlp_norm));
        for (slot, p) in b.proj.iter().enumerate() {
            let name = Model::layer_name(li, slot);
            match p {
                Projection::Dense(w) => put(format!("{name}.weight"), TensorRecord::from_f64(&[w.rows(), w.cols()], w.as_slice())),
                Projection::Factored(l) => {
                    let (bm, am) = (l.low_rank().b(), l.low_rank().a());
                    put(format!("{name}.B"), TensorRecord::from_f64(&[bm.rows(), bm.cols()], bm.as_slice()));
                    put(format!("{name}.A"), TensorRecord::from_f64(&[am.rows(), am.cols()], am.as_slice()));
                    let idx: Vec<i64> = l.sparse().support().as_slice().iter().map(|&i| i as i64).collect();
                    put(format!("{name}.sparse_idx"), TensorRecord::from_i64(&[idx.len()], &idx));
                    put(format!("{name}.sparse_val"), TensorRecord::from_f64(&[idx.len()], l.sparse().values()));
                    if let Some(w0) = l.base() {
                        put(format!("{name}.base"), TensorRecord::from_f64(&[w0.rows(), w0.cols()], w0.as_slice()));
                    }
                }
            }
        }
    }
    if let Some(opt) = opt {
        for (name, m) in opt.moments() {
            put(format!("optim.{name}.m"), TensorRecord::from_f64(&[m.m.len()], &m.m));
            put(format!("optim.{name}.v"), TensorRecord::from_f64(&[m.v.len()], &m.v));
        }
    }
    let meta = CheckpointMeta {
        model: cfg.clone(),
        adam: opt.map(|o| *o.config()).unwrap_or_default(),
        train: train.cloned(),
    };
    Checkpoint {
        config_json: serde_json::to_string(&meta).expect("meta serializes"),
        step: opt.map_or(0, |o| o.step_count()),
        tensors,
    }
}

/// Rebuilds the model and optimizer from a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, Adam, CheckpointMeta)> {
    let meta = ckpt.meta()?;
    let cfg = &meta.model;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let mut proj = Vec::with_capacity(7);
        for (slot, &(out, inp)) in cfg.block_projection_shapes().iter().enumerate() {
            let name = Model::layer_name(li, slot);
            let weight = format!("{name}.weight");
            if ckpt.tensors.contains_key(&weight) {
                proj.push(Projection::Dense(ckpt.matrix(&weight)?));
                continue;
            }
            let low = LowRankFactor::new(ckpt.matrix(&format!("{name}.B"))?, ckpt.matrix(&format!("{name}.A"))?, cfg.alpha)?;
            let idx: Vec<usize> = ckpt
                .tensor(&format!("{name}.sparse_idx"))?
                .to_i64()?
                .into_iter()
                .map(|i| usize::try_from(i).map_err(|_| Error::Format(format!("negative sparse index in `{name}`"))))
                .collect::<Result<_>>()?;
            let delta = if idx.is_empty() { 0.0 } else { cfg.delta };
            let sparse = SparseFactor::new(IndexSet::new(out, inp, idx)?, ckpt.vector(&format!("{name}.sparse_val"))?, delta)?;
            let base_name = format!("{name}.base");
            let base = if ckpt.tensors.contains_key(&base_name) {
                Some(ckpt.matrix(&base_name)?)
            } else {
                None
            };
            proj.push(Projection::Factored(SlLinear::from_parts(low, sparse, base)?));
        }
        blocks.push(Block {
            attn_norm: ckpt.vector(&format!("blocks.{li}.attn_norm"))?,
            proj: proj.try_into().expect("seven projections"),
            mlp_norm: ckpt.vector(&format!("blocks.{li}.mlp_norm"))?,
        });
    }
    let head = if ckpt.tensors.contains_key("head") {
        Some(ckpt.matrix("head")?)
    } else {
        None
    };
    let model = Model::from_parts(cfg.clone(), ckpt.matrix("embed")?, blocks, ckpt.vector("final_norm")?, head)?;
    let mut moments = BTreeMap::new();
    for name in ckpt.tensors.keys() {
        if let Some(param) = name.strip_prefix("optim.").and_then(|n| n.strip_suffix(".m")) {
            let m = ckpt.vector(name)?;
            let v = ckpt.vector(&format!("optim.{param}.v"))?;
            moments.insert(param.to_string(), Moments { m, v });
        }
    }
    let opt = Adam::restore(meta.adam, ckpt.step, moments);
    Ok((model, opt, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamMode};

    fn tiny(mode: ParamMode) -> ModelConfig {
        ModelConfig {
            vocab: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_inner: Some(12),
            seq_len: 6,
            rank: 2,
            delta: 0.2,
            alpha: 4.0,
            ..ModelConfig::micro(mode)
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for mode in [ParamMode::Sltrain, ParamMode::LowRank, ParamMode::FullRank] {
            let model = Model::init(&tiny(mode)).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            opt.begin_step();
            let mut m2 = model.clone();
            m2.visit_params_mut(|n, _, t| opt.update(n, t, &vec![0.5; t.len()], 0.01)).unwrap();
            let bytes = capture(&m2, Some(&opt), None).to_bytes();
            let ck = Checkpoint::from_bytes(&bytes).unwrap();
            let (model2, opt2, _) = restore(&ck).unwrap();
            assert_eq!(model2, m2);
            assert_eq!(opt2, opt);
            assert_eq!(capture(&model2, Some(&opt2), None).to_bytes(), bytes);
        }
    }

    #[test]
    fn adapter_round_trip() {
        let full = Model::init(&tiny(ParamMode::FullRank)).unwrap();
        let ad = full.into_adapter(2, 0.1, 4.0, 3).unwrap();
        let ck = capture(&ad, None, None);
        assert!(ck.tensors.contains_key("blocks.0.attn.q.base"));
        let (back, _, _) = restore(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.blocks, ad.blocks);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = capture(&Model::init(&tiny(ParamMode::Sltrain)).unwrap(), None, None).to_bytes();
        let mut v = bytes.clone();
        v[8] = 2;
        let err = Checkpoint::from_bytes(&v).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn f32_records_widen() {
        let r = TensorRecord::from_f32(&[2], &[1.5, -2.25]);
        assert_eq!(r.to_f64().unwrap(), vec![1.5, -2.25]);
        assert!(r.to_i64().is_err());
        assert_eq!(TensorRecord::from_i64(&[1], &[-3]).to_i64().unwrap(), vec![-3]);
    }
}
