use std::collections::BTreeMap;

use super::ops::{rmsnorm, rmsnorm_backward, rope_in_place, silu, silu_grad};
use super::{Model, Projection, ProjectionGrad};
use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, Matrix};

/// Gradients keyed by the names of [`Model::visit_params`].
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Sequences of token ids; each predicts its own tokens `1..` from `..len-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    seqs: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(seqs: Vec<Vec<u32>>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::InvalidArgument(format!(
                "sequence of length {} cannot predict a next token",
                s.len()
            )));
        }
        Ok(Self { seqs })
    }

    pub fn seqs(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    /// Number of predicted positions.
    pub fn predicted(&self) -> usize {
        self.seqs.iter().map(|s| s.len() - 1).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Mean next-token cross-entropy in nats.
    pub loss: f64,
    pub loss_sum: f64,
    pub count: usize,
}

struct BlockCache {
    h_in: Matrix,
    a_inv: Vec<f64>,
    a: Matrix,
    /// Post-rotary queries and keys, and values, all `tokens x d`.
    qt: Matrix,
    kt: Matrix,
    vt: Matrix,
    /// Row-major `T x T` attention weights per (sequence, head).
    att: Vec<Vec<f64>>,
    ctx: Matrix,
    h_mid: Matrix,
    m_inv: Vec<f64>,
    m: Matrix,
    g: Matrix,
    u: Matrix,
    act: Matrix,
}

/// Activations retained between [`Model::forward_loss`] and [`Model::backward`].
pub struct ForwardCache {
    version: u64,
    spans: Vec<(usize, usize)>,
    positions: Vec<usize>,
    inputs: Vec<u32>,
    targets: Vec<u32>,
    blocks: Vec<BlockCache>,
    h_final: Matrix,
    final_inv: Vec<f64>,
    /// Final normalized hidden state, `tokens x d`.
    ft: Matrix,
    /// Softmax over the vocabulary, `tokens x vocab`.
    probs: Matrix,
}

impl ForwardCache {
    pub fn token_count(&self) -> usize {
        self.inputs.len()
    }
}

impl Model {
    fn check_tokens(&self, seq: &[u32]) -> Result<()> {
        let vocab = self.config().vocab;
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                bound: vocab,
            });
        }
        Ok(())
    }

    /// Runs the decoder over `inputs`, returning the final hidden state and caches.
    fn forward_hidden(&self, inputs: &[&[u32]]) -> Result<ForwardCache> {
        let cfg = self.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let mut spans = Vec::with_capacity(inputs.len());
        let mut positions = Vec::new();
        let mut flat = Vec::new();
        for seq in inputs {
            if seq.len() > cfg.seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence length {} exceeds the configured limit {}",
                    seq.len(),
                    cfg.seq_len
                )));
            }
            self.check_tokens(seq)?;
            spans.push((flat.len(), seq.len()));
            positions.extend(0..seq.len());
            flat.extend_from_slice(seq);
        }
        let n = flat.len();
        let mut h = Matrix::zeros(d, n);
        for (j, &tok) in flat.iter().enumerate() {
            for (i, &e) in self.embed.row(tok as usize).iter().enumerate() {
                h.set(i, j, e);
            }
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a, a_inv) = rmsnorm(&h, &b.attn_norm, cfg.norm_eps);
            let mut q = b.proj[0].forward(&a)?;
            let mut k = b.proj[1].forward(&a)?;
            let v = b.proj[2].forward(&a)?;
            if cfg.rope {
                rope_in_place(&mut q, heads, &positions, cfg.rope_base, 1.0);
                rope_in_place(&mut k, heads, &positions, cfg.rope_base, 1.0);
            }
            let (qt, kt, vt) = (q.transpose(), k.transpose(), v.transpose());
            let (ctx, att) = attention(&qt, &kt, &vt, &spans, heads);
            let o = b.proj[3].forward(&ctx)?;
            let mut h_mid = h.clone();
            h_mid.add_scaled(&o, 1.0)?;
            let (m, m_inv) = rmsnorm(&h_mid, &b.mlp_norm, cfg.norm_eps);
            let g = b.proj[4].forward(&m)?;
            let u = b.proj[5].forward(&m)?;
            let act = Matrix::from_raw(
                g.rows(),
                g.cols(),
                g.as_slice().iter().zip(u.as_slice()).map(|(&gv, &uv)| silu(gv) * uv).collect(),
            );
            let down = b.proj[6].forward(&act)?;
            let mut h_out = h_mid.clone();
            h_out.add_scaled(&down, 1.0)?;
            blocks.push(BlockCache {
                h_in: std::mem::replace(&mut h, h_out),
                a_inv,
                a,
                qt,
                kt,
                vt,
                att,
                ctx,
                h_mid,
                m_inv,
                m,
                g,
                u,
                act,
            });
        }
        let (f, final_inv) = rmsnorm(&h, &self.final_norm, cfg.norm_eps);
        Ok(ForwardCache {
            version: self.version(),
            spans,
            positions,
            inputs: flat,
            targets: Vec::new(),
            blocks,
            h_final: h,
            final_inv,
            ft: f.transpose(),
            probs: Matrix::zeros(0, 0),
        })
    }

    /// Next-token logits (`tokens x vocab`) for one sequence.
    pub fn logits(&self, seq: &[u32]) -> Result<Matrix> {
        let cache = self.forward_hidden(&[seq])?;
        matmul_nt(&cache.ft, self.head_matrix())
    }

    /// Mean next-token cross-entropy over the batch, plus the activation cache.
    pub fn forward_loss(&self, batch: &Batch) -> Result<(ForwardOutput, ForwardCache)> {
        let inputs: Vec<&[u32]> = batch.seqs().iter().map(|s| &s[..s.len() - 1]).collect();
        let mut cache = self.forward_hidden(&inputs)?;
        for s in batch.seqs() {
            self.check_tokens(s)?;
            cache.targets.extend_from_slice(&s[1..]);
        }
        let mut probs = matmul_nt(&cache.ft, self.head_matrix())?;
        let mut loss_sum = 0.0;
        for (j, &t) in cache.targets.iter().enumerate() {
            let row = probs.row_mut(j);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss_sum -= row[t as usize].ln();
        }
        cache.probs = probs;
        let count = cache.targets.len();
        Ok((
            ForwardOutput {
                loss: loss_sum / count as f64,
                loss_sum,
                count,
            },
            cache,
        ))
    }

    /// Gradients of `loss_scale * mean loss` with respect to every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache, loss_scale: f64) -> Result<Gradients> {
        if cache.version != self.version() || cache.targets.is_empty() {
            return Err(Error::StaleCache);
        }
        let cfg = self.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let n = cache.inputs.len();
        let mut grads = Gradients::new();

        let coef = loss_scale / n as f64;
        let mut dlogits = cache.probs.clone();
        for (j, &t) in cache.targets.iter().enumerate() {
            let row = dlogits.row_mut(j);
            row[t as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v *= coef);
        }
        let dhead = matmul_tn(&dlogits, &cache.ft)?;
        let df = matmul(&dlogits, self.head_matrix())?.transpose();
        let mut dembed = Matrix::zeros(cfg.vocab, d);
        if self.head.is_some() {
            grads.insert("head".into(), dhead.into_vec());
        } else {
            dembed = dhead;
        }
        let mut dnorm = vec![0.0; d];
        let mut dh = rmsnorm_backward(&cache.h_final, &self.final_norm, &cache.final_inv, &df, &mut dnorm);
        grads.insert("final_norm".into(), dnorm);

        for (li, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP.
            let (g_down, dact) = b.proj[6].backward(&c.act, &dh)?;
            let mut dg = Matrix::zeros(c.g.rows(), c.g.cols());
            let mut du = Matrix::zeros(c.u.rows(), c.u.cols());
            for idx in 0..dact.len() {
                let (gv, uv, da) = (c.g.as_slice()[idx], c.u.as_slice()[idx], dact.as_slice()[idx]);
                dg.as_mut_slice()[idx] = da * uv * silu_grad(gv);
                du.as_mut_slice()[idx] = da * silu(gv);
            }
            let (g_gate, mut dm) = b.proj[4].backward(&c.m, &dg)?;
            let (g_up, dm_up) = b.proj[5].backward(&c.m, &du)?;
            dm.add_scaled(&dm_up, 1.0)?;
            let mut d_mlp_norm = vec![0.0; d];
            let mut dh_mid = rmsnorm_backward(&c.h_mid, &b.mlp_norm, &c.m_inv, &dm, &mut d_mlp_norm);
            dh_mid.add_scaled(&dh, 1.0)?;

            // Attention.
            let (g_o, dctx) = b.proj[3].backward(&c.ctx, &dh_mid)?;
            let (mut dq, mut dk, dv) = attention_backward(c, &dctx.transpose(), &cache.spans, heads);
            if cfg.rope {
                rope_in_place(&mut dq, heads, &cache.positions, cfg.rope_base, -1.0);
                rope_in_place(&mut dk, heads, &cache.positions, cfg.rope_base, -1.0);
            }
            let (g_q, mut da) = b.proj[0].backward(&c.a, &dq)?;
            let (g_k, da_k) = b.proj[1].backward(&c.a, &dk)?;
            let (g_v, da_v) = b.proj[2].backward(&c.a, &dv)?;
            da.add_scaled(&da_k, 1.0)?;
            da.add_scaled(&da_v, 1.0)?;
            let mut d_attn_norm = vec![0.0; d];
            let mut dh_in = rmsnorm_backward(&c.h_in, &b.attn_norm, &c.a_inv, &da, &mut d_attn_norm);
            dh_in.add_scaled(&dh_mid, 1.0)?;

            grads.insert(format!("blocks.{li}.attn_norm"), d_attn_norm);
            grads.insert(format!("blocks.{li}.mlp_norm"), d_mlp_norm);
            for (slot, g) in [g_q, g_k, g_v, g_o, g_gate, g_up, g_down].into_iter().enumerate() {
                insert_projection_grad(&mut grads, &Model::layer_name(li, slot), &b.proj[slot], g);
            }
            dh = dh_in;
        }

        for (j, &tok) in cache.inputs.iter().enumerate() {
            let row = dembed.row_mut(tok as usize);
            for (i, r) in row.iter_mut().enumerate() {
                *r += dh.get(i, j);
            }
        }
        grads.insert("embed".into(), dembed.into_vec());
        Ok(grads)
    }

    /// Summed cross-entropy and predicted-token count over a stream, evaluated
    /// in windows of `seq_len` inputs that overlap by one token.
    pub fn stream_loss(&self, stream: &[u32]) -> Result<(f64, usize)> {
        if stream.len() < 2 {
            return Err(Error::InvalidArgument("evaluation stream needs at least two tokens".into()));
        }
        let l = self.config().seq_len;
        let mut windows = Vec::new();
        let mut start = 0;
        while start + 1 < stream.len() {
            let end = (start + l + 1).min(stream.len());
            windows.push(stream[start..end].to_vec());
            start += l;
        }
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in windows.chunks(16) {
            let (out, _) = self.forward_loss(&Batch::new(chunk.to_vec())?)?;
            sum += out.loss_sum;
            count += out.count;
        }
        Ok((sum, count))
    }

    /// `exp` of the mean next-token cross-entropy over `stream`.
    pub fn perplexity(&self, stream: &[u32]) -> Result<f64> {
        let (sum, count) = self.stream_loss(stream)?;
        Ok((sum / count as f64).exp())
    }
}

fn insert_projection_grad(grads: &mut Gradients, name: &str, proj: &Projection, g: ProjectionGrad) {
    match g {
        ProjectionGrad::Dense(w) => {
            grads.insert(format!("{name}.weight"), w.into_vec());
        }
        ProjectionGrad::Factored { db, da, dv } => {
            grads.insert(format!("{name}.B"), db.into_vec());
            grads.insert(format!("{name}.A"), da.into_vec());
            if proj.as_factored().is_some_and(|l| l.sparse().nnz() > 0) {
                grads.insert(format!("{name}.sparse_val"), dv);
            }
        }
    }
}

/// Causal softmax attention over `tokens x d` inputs; returns the context as
/// `d x tokens` and the attention weights per (sequence, head).
fn attention(qt: &Matrix, kt: &Matrix, vt: &Matrix, spans: &[(usize, usize)], heads: usize) -> (Matrix, Vec<Vec<f64>>) {
    let (n, d) = qt.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx_t = Matrix::zeros(n, d);
    let mut all = Vec::with_capacity(spans.len() * heads);
    for &(off, len) in spans {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let mut p = vec![0.0; len * len];
            for t in 0..len {
                let q = &qt.row(off + t)[cols.clone()];
                let row = &mut p[t * len..t * len + t + 1];
                let mut max = f64::NEG_INFINITY;
                for (s, slot) in row.iter_mut().enumerate() {
                    let k = &kt.row(off + s)[cols.clone()];
                    *slot = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*slot);
                }
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
                let out = &mut ctx_t.row_mut(off + t)[cols.clone()];
                for (s, &w) in row.iter().enumerate() {
                    let v = &vt.row(off + s)[cols.clone()];
                    out.iter_mut().zip(v).for_each(|(o, vv)| *o += w * vv);
                }
            }
            all.push(p);
        }
    }
    (ctx_t.transpose(), all)
}

/// Returns `(dq, dk, dv)` as `d x tokens`.
fn attention_backward(c: &BlockCache, dctx_t: &Matrix, spans: &[(usize, usize)], heads: usize) -> (Matrix, Matrix, Matrix) {
    let (n, d) = c.qt.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = Vec::new();
    for (si, &(off, len)) in spans.iter().enumerate() {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let p = &c.att[si * heads + h];
            for t in 0..len {
                let dout = &dctx_t.row(off + t)[cols.clone()];
                let prow = &p[t * len..t * len + t + 1];
                dp.clear();
                let mut weighted = 0.0;
                for (s, &w) in prow.iter().enumerate() {
                    let v = &c.vt.row(off + s)[cols.clone()];
                    let g = dout.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                    dp.push(g);
                    weighted += w * g;
                    let dvr = &mut dv.row_mut(off + s)[cols.clone()];
                    dvr.iter_mut().zip(dout).for_each(|(x, y)| *x += w * y);
                }
                let q = c.qt.row(off + t)[cols.clone()].to_vec();
                for (s, &w) in prow.iter().enumerate() {
                    let ds = w * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &c.kt.row(off + s)[cols.clone()];
                    let dqr = &mut dq.row_mut(off + t)[cols.clone()];
                    dqr.iter_mut().zip(k).for_each(|(x, y)| *x += ds * y);
                    let dkr = &mut dk.row_mut(off + s)[cols.clone()];
                    dkr.iter_mut().zip(&q).for_each(|(x, y)| *x += ds * y);
                }
            }
        }
    }
    (dq.transpose(), dk.transpose(), dv.transpose())
}
