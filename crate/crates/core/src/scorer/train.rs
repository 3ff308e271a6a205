use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, ScorerParams, Trainable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            seed: 7,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over the trainable tensors only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    m: Trainable,
    v: Trainable,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ScorerParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: params.trainable.zeros_like(),
            v: params.trainable.zeros_like(),
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut ScorerParams, grads: &Trainable) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let m_all = self.m.tensors_mut();
        let v_all = self.v.tensors_mut();
        let p_all = params.trainable.tensors_mut();
        for (((_, p), (_, g)), ((_, m), (_, v))) in p_all.into_iter().zip(grads.tensors()).zip(m_all.into_iter().zip(v_all)) {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }
}

/// One pass over `samples` in a seeded shuffled order, minimizing `objective`
/// per mini-batch. Returns the per-batch objective values.
pub fn train_epoch_with<F>(
    params: &mut ScorerParams,
    opt: &mut AdamW,
    samples: &[Sample],
    epoch: u64,
    objective: F,
) -> Result<Vec<f64>>
where
    F: Fn(&ScorerParams, &[&Sample]) -> Result<(f64, Trainable)>,
{
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opt.cfg.seed.wrapping_add(epoch)));
    let mut trace = Vec::new();
    for (b, idx) in order.chunks(opt.cfg.batch_size).enumerate() {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (loss, grads) = match objective(params, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    batch: b,
                    loss: f64::NAN,
                    trace,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { batch: b, loss, trace });
        }
        opt.step(params, &grads);
        trace.push(loss);
    }
    Ok(trace)
}

/// Batch-mean NTP training for one epoch.
pub fn train_epoch(params: &mut ScorerParams, opt: &mut AdamW, samples: &[Sample], epoch: u64) -> Result<Vec<f64>> {
    train_epoch_with(params, opt, samples, epoch, |p, batch| {
        let (loss, mut grads) = p.ntp_loss_and_grad(batch)?;
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((loss * inv, grads))
    })
}
