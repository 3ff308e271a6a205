//! A small autoregressive scorer: one frozen gated cross-attention layer over
//! the behavior sequence, per-step affine rank heads, and analytic gradients
//! for any step-weighted negative log-likelihood.

mod count;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::linalg::{axpy, dot, log_softmax, positional_encoding, softmax, Matrix};
use crate::tokenizer::{HashSpec, SequenceLayout, TokenSequence};

pub use count::CountScorer;
pub use train::{train_epoch, train_epoch_with, AdamW, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub d_model: usize,
    /// Number of most recent decoded tokens fed to the rank heads.
    pub prefix_window: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            prefix_window: 4,
            seed: 7,
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub request_id: String,
    /// Corpus positions of the user's earlier engaged items, oldest first.
    pub behavior: Vec<usize>,
    pub target: TokenSequence,
    pub alpha: f64,
    pub is_order: bool,
    pub metrics: BTreeMap<String, f64>,
}

/// Trainable tensors. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub bos_emb: Matrix,
    pub token_emb: Matrix,
    /// One row per corpus item plus a trailing padding row.
    pub behavior_emb: Matrix,
    pub hash_table: Matrix,
    pub head_w: Vec<Matrix>,
    pub head_b: Vec<Vec<f64>>,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            bos_emb: self.bos_emb.zeros_like(),
            token_emb: self.token_emb.zeros_like(),
            behavior_emb: self.behavior_emb.zeros_like(),
            hash_table: self.hash_table.zeros_like(),
            head_w: self.head_w.iter().map(Matrix::zeros_like).collect(),
            head_b: self.head_b.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Named flat views, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("bos_emb".into(), self.bos_emb.as_slice()),
            ("token_emb".into(), self.token_emb.as_slice()),
            ("behavior_emb".into(), self.behavior_emb.as_slice()),
            ("hash_table".into(), self.hash_table.as_slice()),
        ];
        for (t, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.push((format!("head_w[{}]", t + 1), w.as_slice()));
            out.push((format!("head_b[{}]", t + 1), b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("bos_emb".into(), self.bos_emb.as_mut_slice()),
            ("token_emb".into(), self.token_emb.as_mut_slice()),
            ("behavior_emb".into(), self.behavior_emb.as_mut_slice()),
            ("hash_table".into(), self.hash_table.as_mut_slice()),
        ];
        for (t, (w, b)) in self.head_w.iter_mut().zip(self.head_b.iter_mut()).enumerate() {
            out.push((format!("head_w[{}]", t + 1), w.as_mut_slice()));
            out.push((format!("head_b[{}]", t + 1), b.as_mut_slice()));
        }
        out
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Trainable, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(scale, src, dst);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if !t.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

/// Tensors fixed at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frozen {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub gamma: f64,
}

impl Frozen {
    /// SHA-256 over the little-endian bytes of every frozen value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.w_q, &self.w_k, &self.w_v] {
            for x in m.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.update(self.gamma.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub layout: SequenceLayout,
    pub hash: HashSpec,
    pub trainable: Trainable,
    pub frozen: Frozen,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// Behavior keys, values and pooled embedding for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    /// Behavior-embedding rows used, in sequence order.
    pub rows: Vec<usize>,
    pub keys: Matrix,
    pub values: Matrix,
    pub h_agg: Vec<f64>,
}

/// Rank-head input at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub q: Vec<f64>,
    pub e_prefix: Vec<f64>,
    pub c: Vec<f64>,
    pub h_agg: Vec<f64>,
}

impl StepState {
    pub fn features(&self) -> Vec<f64> {
        [&self.q[..], &self.e_prefix, &self.c, &self.h_agg].concat()
    }
}

/// `gamma * softmax(Q K^T / sqrt(d_model)) V`, row by row.
pub fn gated_cross_attention(q: &Matrix, k: &Matrix, v: &Matrix, gamma: f64, d_model: usize) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 || d_model == 0 {
        return Err(Error::Dimension(format!(
            "attention shapes Q {}x{}, K {}x{}, V {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for (i, qi) in q.iter_rows().enumerate() {
        let (_, ctx) = attend(qi, k, v, gamma, d_model);
        out.row_mut(i).copy_from_slice(&ctx);
    }
    Ok(out)
}

fn attend(q: &[f64], k: &Matrix, v: &Matrix, gamma: f64, d_model: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d_model as f64).sqrt();
    let scores: Vec<f64> = k.iter_rows().map(|kj| dot(q, kj) * scale).collect();
    let weights = softmax(&scores);
    let mut out = vec![0.0; v.cols()];
    for (a, vj) in weights.iter().zip(v.iter_rows()) {
        axpy(gamma * a, vj, &mut out);
    }
    (weights, out)
}

#[derive(Debug, Clone, Copy)]
enum QueryRow {
    Bos(usize),
    Token(usize),
}

/// Everything the backward pass needs from one step.
struct StepForward {
    state: StepState,
    query_row: QueryRow,
    qr: Vec<f64>,
    attn: Vec<f64>,
    prefix_rows: Vec<Option<usize>>,
    hash_rows: Vec<usize>,
}

/// Per-sample gradient flowing back into the behavior encoder.
struct ContextGrad {
    d_keys: Matrix,
    d_values: Matrix,
    d_h_agg: Vec<f64>,
}

impl ScorerParams {
    /// Random initialization. `n_bos` task tokens; `n_items` behavior items
    /// (a padding row is appended).
    pub fn new(config: ScorerConfig, layout: SequenceLayout, hash: HashSpec, n_bos: usize, n_items: usize) -> Result<Self> {
        let d = config.d_model;
        if d == 0 || n_bos == 0 {
            return Err(Error::Config("d_model and the BOS vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let emb_bound = 1.0 / (d as f64).sqrt();
        let bos_emb = uniform(&mut rng, n_bos, d, emb_bound);
        let token_emb = uniform(&mut rng, layout.total_tokens(), d, emb_bound);
        let behavior_emb = uniform(&mut rng, n_items + 1, d, emb_bound);
        let hash_table = uniform(&mut rng, hash.table_rows, hash.d_hash, 1.0 / (hash.d_hash as f64).sqrt());
        let input_dim = d * (2 + config.prefix_window) + hash.summary_dim();
        let head_bound = 1.0 / (input_dim as f64).sqrt();
        let head_w = layout
            .step_vocab
            .iter()
            .map(|&v| uniform(&mut rng, v, input_dim, head_bound))
            .collect();
        let head_b = layout.step_vocab.iter().map(|&v| vec![0.0; v]).collect();
        let w_q = uniform(&mut rng, d, d, emb_bound);
        let w_k = uniform(&mut rng, d, d, emb_bound);
        let w_v = uniform(&mut rng, d, d, emb_bound);
        Ok(Self {
            config,
            layout,
            hash,
            trainable: Trainable {
                bos_emb,
                token_emb,
                behavior_emb,
                hash_table,
                head_w,
                head_b,
            },
            frozen: Frozen {
                w_q,
                w_k,
                w_v,
                gamma: 1.0,
            },
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn input_dim(&self) -> usize {
        self.d_model() * (2 + self.config.prefix_window) + self.hash.summary_dim()
    }

    pub fn n_items(&self) -> usize {
        self.trainable.behavior_emb.rows() - 1
    }

    pub fn n_bos(&self) -> usize {
        self.trainable.bos_emb.rows()
    }

    pub fn num_steps(&self) -> usize {
        self.layout.num_steps()
    }

    /// Checks shapes against the layout and every value for finiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let t = &self.trainable;
        let shapes = [
            ("bos_emb", &t.bos_emb, t.bos_emb.rows(), d),
            ("token_emb", &t.token_emb, self.layout.total_tokens(), d),
            ("behavior_emb", &t.behavior_emb, t.behavior_emb.rows().max(1), d),
            ("hash_table", &t.hash_table, self.hash.table_rows, self.hash.d_hash),
            ("w_q", &self.frozen.w_q, d, d),
            ("w_k", &self.frozen.w_k, d, d),
            ("w_v", &self.frozen.w_v, d, d),
        ];
        for (name, m, rows, cols) in shapes {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if t.head_w.len() != self.num_steps() || t.head_b.len() != self.num_steps() {
            return Err(Error::Dimension("one rank head per step expected".into()));
        }
        for (s, (w, b)) in t.head_w.iter().zip(&t.head_b).enumerate() {
            let v = self.layout.step_vocab[s];
            if w.rows() != v || w.cols() != self.input_dim() || b.len() != v {
                return Err(Error::Dimension(format!("rank head {} has the wrong shape", s + 1)));
            }
        }
        for (name, x) in t.tensors() {
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        if !(self.frozen.w_q.is_finite() && self.frozen.w_k.is_finite() && self.frozen.w_v.is_finite())
            || !self.frozen.gamma.is_finite()
        {
            return Err(Error::NonFinite("frozen attention tensors".into()));
        }
        Ok(())
    }

    pub fn encode_context(&self, behavior: &[usize]) -> Result<EncodedContext> {
        let n_items = self.n_items();
        if let Some(b) = behavior.iter().find(|&&b| b >= n_items) {
            return Err(Error::Unknown {
                kind: "behavior item",
                value: b.to_string(),
            });
        }
        let rows: Vec<usize> = if behavior.is_empty() {
            vec![n_items]
        } else {
            behavior.to_vec()
        };
        let d = self.d_model();
        let emb = &self.trainable.behavior_emb;
        let mut keys = Matrix::zeros(rows.len(), d);
        let mut values = Matrix::zeros(rows.len(), d);
        let mut h_agg = vec![0.0; d];
        for (j, &r) in rows.iter().enumerate() {
            let mut input = positional_encoding(j, d);
            axpy(1.0, emb.row(r), &mut input);
            keys.row_mut(j).copy_from_slice(&self.frozen.w_k.left_mul(&input));
            values.row_mut(j).copy_from_slice(&self.frozen.w_v.left_mul(&input));
            axpy(1.0, emb.row(r), &mut h_agg);
        }
        let inv = 1.0 / rows.len() as f64;
        h_agg.iter_mut().for_each(|x| *x *= inv);
        Ok(EncodedContext {
            rows,
            keys,
            values,
            h_agg,
        })
    }

    fn check_bos(&self, bos: u32) -> Result<()> {
        if bos as usize >= self.n_bos() {
            return Err(Error::Unknown {
                kind: "task BOS token",
                value: bos.to_string(),
            });
        }
        Ok(())
    }

    fn step_forward(&self, ctx: &EncodedContext, bos: u32, prefix: &[u32], step: usize) -> Result<StepForward> {
        self.layout.check_step(step)?;
        if prefix.len() < step - 1 {
            return Err(Error::Dimension(format!(
                "step {step} needs {} prefix tokens, got {}",
                step - 1,
                prefix.len()
            )));
        }
        let d = self.d_model();
        let t = &self.trainable;
        let query_row = if step == 1 {
            self.check_bos(bos)?;
            QueryRow::Bos(bos as usize)
        } else {
            QueryRow::Token(self.layout.global_index(step - 1, prefix[step - 2])?)
        };
        let mut r = positional_encoding(step - 1, d);
        match query_row {
            QueryRow::Bos(i) => axpy(1.0, t.bos_emb.row(i), &mut r),
            QueryRow::Token(i) => axpy(1.0, t.token_emb.row(i), &mut r),
        }
        let qr = self.frozen.w_q.left_mul(&r);
        let (attn, attended) = attend(&qr, &ctx.keys, &ctx.values, self.frozen.gamma, d);
        let mut q = r;
        axpy(1.0, &attended, &mut q);

        let window = self.config.prefix_window;
        let mut e_prefix = vec![0.0; window * d];
        let mut prefix_rows = Vec::with_capacity(window);
        for s in 0..window {
            let row = if step > s + 1 {
                let src = step - 1 - s;
                Some(self.layout.global_index(src, prefix[src - 1])?)
            } else {
                None
            };
            if let Some(i) = row {
                e_prefix[s * d..(s + 1) * d].copy_from_slice(t.token_emb.row(i));
            }
            prefix_rows.push(row);
        }

        let hash_rows = self.hash.summary_rows(&self.layout, prefix, step)?;
        let mut c = Vec::with_capacity(self.hash.summary_dim());
        for &row in &hash_rows {
            c.extend_from_slice(t.hash_table.row(row));
        }
        Ok(StepForward {
            state: StepState {
                q,
                e_prefix,
                c,
                h_agg: ctx.h_agg.clone(),
            },
            query_row,
            qr,
            attn,
            prefix_rows,
            hash_rows,
        })
    }

    /// Rank-head input at `step` given the tokens decoded at steps `1..step`.
    pub fn step_state(&self, ctx: &EncodedContext, bos: u32, prefix: &[u32], step: usize) -> Result<StepState> {
        Ok(self.step_forward(ctx, bos, prefix, step)?.state)
    }

    /// `W^(t) x_t + b^(t)` over the step vocabulary.
    pub fn step_logits(&self, state: &StepState, step: usize) -> Result<Vec<f64>> {
        self.layout.check_step(step)?;
        let x = state.features();
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "step state has width {}, rank head expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut logits = self.trainable.head_w[step - 1].mul_vec(&x);
        axpy(1.0, &self.trainable.head_b[step - 1], &mut logits);
        Ok(logits)
    }

    fn check_target(&self, seq: &TokenSequence) -> Result<Vec<u32>> {
        self.check_bos(seq.bos)?;
        let tokens = seq.steps();
        if tokens.len() != self.num_steps() {
            return Err(Error::Dimension(format!(
                "sequence for item {} has {} steps, layout has {}",
                seq.item_id,
                tokens.len(),
                self.num_steps()
            )));
        }
        for (s, &tok) in tokens.iter().enumerate() {
            self.layout.global_index(s + 1, tok)?;
        }
        Ok(tokens)
    }

    /// Teacher-forced log-probability of each target token.
    pub fn sequence_logprobs(&self, sample: &Sample) -> Result<Vec<f64>> {
        let tokens = self.check_target(&sample.target)?;
        let ctx = self.encode_context(&sample.behavior)?;
        (1..=self.num_steps())
            .map(|step| {
                let f = self.step_forward(&ctx, sample.target.bos, &tokens, step)?;
                let logp = log_softmax(&self.step_logits(&f.state, step)?)[tokens[step - 1] as usize];
                if !logp.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "log-probability at step {step} of request {}",
                        sample.request_id
                    )));
                }
                Ok(logp)
            })
            .collect()
    }

    /// Accumulates `sum_t c_t * -log p_t` for one sample into `grads` and
    /// returns its value. Steps with `c_t == 0` contribute no gradient.
    fn accumulate(&self, sample: &Sample, coefs: &[f64], grads: &mut Trainable) -> Result<f64> {
        let tokens = self.check_target(&sample.target)?;
        if coefs.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "{} step weights for {} steps",
                coefs.len(),
                tokens.len()
            )));
        }
        let ctx = self.encode_context(&sample.behavior)?;
        let d = self.d_model();
        let mut cg = ContextGrad {
            d_keys: ctx.keys.zeros_like(),
            d_values: ctx.values.zeros_like(),
            d_h_agg: vec![0.0; d],
        };
        let mut loss = 0.0;
        for step in 1..=tokens.len() {
            let f = self.step_forward(&ctx, sample.target.bos, &tokens, step)?;
            let logits = self.step_logits(&f.state, step)?;
            let target = tokens[step - 1] as usize;
            let logp = log_softmax(&logits);
            if !logp[target].is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-probability at step {step} of request {}",
                    sample.request_id
                )));
            }
            let c = coefs[step - 1];
            loss -= c * logp[target];
            if c != 0.0 {
                let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                self.step_backward(&ctx, &f, step, target, c, &probs, grads, &mut cg);
            }
        }
        self.context_backward(&ctx, &cg, grads);
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_backward(
        &self,
        ctx: &EncodedContext,
        f: &StepForward,
        step: usize,
        target: usize,
        coef: f64,
        probs: &[f64],
        g: &mut Trainable,
        cg: &mut ContextGrad,
    ) {
        let d = self.d_model();
        let mut dlogits: Vec<f64> = probs.iter().map(|p| coef * p).collect();
        dlogits[target] -= coef;

        let x = f.state.features();
        let head = &self.trainable.head_w[step - 1];
        for (r, &dl) in dlogits.iter().enumerate() {
            axpy(dl, &x, g.head_w[step - 1].row_mut(r));
            g.head_b[step - 1][r] += dl;
        }
        let dx = head.left_mul(&dlogits);
        let window = self.config.prefix_window;
        let (dq, rest) = dx.split_at(d);
        let (d_prefix, rest) = rest.split_at(window * d);
        let (d_c, d_h) = rest.split_at(self.hash.summary_dim());

        axpy(1.0, d_h, &mut cg.d_h_agg);
        for (s, row) in f.prefix_rows.iter().enumerate() {
            if let Some(r) = row {
                axpy(1.0, &d_prefix[s * d..(s + 1) * d], g.token_emb.row_mut(*r));
            }
        }
        let dh = self.hash.d_hash;
        for (i, &row) in f.hash_rows.iter().enumerate() {
            axpy(1.0, &d_c[i * dh..(i + 1) * dh], g.hash_table.row_mut(row));
        }

        // q = r + gamma * sum_j a_j v_j, with a = softmax(qr . k_j / sqrt(d))
        let gamma = self.frozen.gamma;
        let scale = 1.0 / (d as f64).sqrt();
        let da: Vec<f64> = ctx.values.iter_rows().map(|vj| gamma * dot(dq, vj)).collect();
        let mean_da: f64 = f.attn.iter().zip(&da).map(|(a, g)| a * g).sum();
        let mut dqr = vec![0.0; d];
        for j in 0..f.attn.len() {
            let a = f.attn[j];
            axpy(gamma * a, dq, cg.d_values.row_mut(j));
            let dscore = a * (da[j] - mean_da) * scale;
            axpy(dscore, ctx.keys.row(j), &mut dqr);
            axpy(dscore, &f.qr, cg.d_keys.row_mut(j));
        }
        let mut dr = dq.to_vec();
        axpy(1.0, &self.frozen.w_q.mul_vec(&dqr), &mut dr);
        match f.query_row {
            QueryRow::Bos(i) => axpy(1.0, &dr, g.bos_emb.row_mut(i)),
            QueryRow::Token(i) => axpy(1.0, &dr, g.token_emb.row_mut(i)),
        }
    }

    fn context_backward(&self, ctx: &EncodedContext, cg: &ContextGrad, g: &mut Trainable) {
        let inv = 1.0 / ctx.rows.len() as f64;
        for (j, &row) in ctx.rows.iter().enumerate() {
            let mut d_input = self.frozen.w_k.mul_vec(cg.d_keys.row(j));
            axpy(1.0, &self.frozen.w_v.mul_vec(cg.d_values.row(j)), &mut d_input);
            axpy(inv, &cg.d_h_agg, &mut d_input);
            axpy(1.0, &d_input, g.behavior_emb.row_mut(row));
        }
    }

    /// `sum_i sum_t c_it * -log p(s_t | s_<t, u, c_task)` and its gradient,
    /// with one step-weight vector per sample.
    ///
    /// Samples are split into a fixed number of chunks that may run in
    /// parallel; partial results are reduced in chunk order, so the output
    /// does not depend on the thread count.
    pub fn weighted_nll_and_grad(&self, items: &[(&Sample, Vec<f64>)]) -> Result<(f64, Trainable)> {
        const CHUNKS: usize = 8;
        let chunk = items.len().div_ceil(CHUNKS).max(1);
        let parts: Vec<Result<(f64, Trainable)>> = items
            .par_chunks(chunk)
            .map(|part| {
                let mut g = self.trainable.zeros_like();
                let mut loss = 0.0;
                for (sample, coefs) in part {
                    loss += self.accumulate(sample, coefs, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect();
        let mut total_loss = 0.0;
        let mut total: Option<Trainable> = None;
        for part in parts {
            let (loss, g) = part?;
            total_loss += loss;
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.add_scaled(&g, 1.0),
            }
        }
        let grads = total.unwrap_or_else(|| self.trainable.zeros_like());
        if !total_loss.is_finite() {
            return Err(Error::NonFinite("weighted negative log-likelihood".into()));
        }
        grads.check_finite()?;
        Ok((total_loss, grads))
    }

    /// Teacher-forced NTP loss `-sum_i alpha_i sum_t log p` and its gradient.
    pub fn ntp_loss_and_grad(&self, batch: &[&Sample]) -> Result<(f64, Trainable)> {
        let items: Vec<(&Sample, Vec<f64>)> = batch
            .iter()
            .map(|s| (*s, vec![s.alpha; self.num_steps()]))
            .collect();
        self.weighted_nll_and_grad(&items)
    }
}

/// Serialized scorer with provenance and a digest of the frozen tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub params: ScorerParams,
    pub frozen_digest: String,
    pub config_digest: Option<String>,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: ScorerParams, config_digest: Option<String>, seed: u64, loss_trace: Vec<f64>) -> Self {
        Self {
            frozen_digest: params.frozen.digest(),
            params,
            config_digest,
            seed,
            loss_trace,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = jsonl::read_json(path)?;
        ckpt.params.validate()?;
        if ckpt.params.frozen.digest() != ckpt.frozen_digest {
            return Err(Error::InvalidInput(format!(
                "{}: frozen tensors do not match their recorded digest",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}
