//! Reward-weighted fine-tuning, request-grouped DPO with a stop-gradient on
//! prefix steps, and their joint objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Event, InteractionLog};
use crate::error::{Error, Result};
use crate::scorer::{AdamW, Sample, ScorerParams, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    /// Weight of each (batch-normalized) metric in the composite reward.
    pub weights: BTreeMap<String, f64>,
    /// Reweighting strength applied to clipped advantages.
    pub lambda: f64,
    pub c_clip: f64,
    pub eps: f64,
    /// Upper bound on the engagement weight of order samples.
    pub alpha_cap: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            weights: [("gmv".to_string(), 0.7), ("watch_time".to_string(), 0.3)].into(),
            lambda: 0.2,
            c_clip: 3.0,
            eps: 1e-8,
            alpha_cap: 10.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.c_clip > 0.0 && self.eps > 0.0 && self.alpha_cap >= 1.0) {
            return Err(Error::Config(format!(
                "reward spec needs lambda >= 0, c_clip > 0, eps > 0, alpha_cap >= 1 (got {}, {}, {}, {})",
                self.lambda, self.c_clip, self.eps, self.alpha_cap
            )));
        }
        Ok(())
    }
}

/// `sum_k weight_k * metric_k`.
pub fn composite_reward(metrics: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    weights
        .iter()
        .map(|(name, w)| {
            metrics
                .get(name)
                .map(|m| w * m)
                .ok_or_else(|| Error::InvalidInput(format!("missing reward metric {name}")))
        })
        .sum()
}

/// Rescales each named metric to [0, 1] across the batch; a constant
/// metric maps to 0.
pub fn min_max_normalize(batch: &[&BTreeMap<String, f64>], names: &[String]) -> Result<Vec<BTreeMap<String, f64>>> {
    let mut out = vec![BTreeMap::new(); batch.len()];
    for name in names {
        let values = batch
            .iter()
            .map(|m| {
                m.get(name)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("missing reward metric {name}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (o, v) in out.iter_mut().zip(values) {
            o.insert(name.clone(), if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
        }
    }
    Ok(out)
}

/// Composite rewards of a batch over min-max normalized metrics.
pub fn batch_rewards(batch: &[&Sample], spec: &RewardSpec) -> Result<Vec<f64>> {
    let names: Vec<String> = spec.weights.keys().cloned().collect();
    let metrics: Vec<&BTreeMap<String, f64>> = batch.iter().map(|s| &s.metrics).collect();
    min_max_normalize(&metrics, &names)?
        .iter()
        .map(|m| composite_reward(m, &spec.weights))
        .collect()
}

/// Sample weight: 1 for clicks; for orders `1 + ln(1 + gmv / mean_gmv)`,
/// capped at `cap`.
pub fn engagement_weight(is_order: bool, gmv: f64, mean_gmv: f64, cap: f64) -> f64 {
    if !is_order || mean_gmv <= 0.0 {
        return 1.0;
    }
    (1.0 + (gmv / mean_gmv).ln_1p()).min(cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub rewards: Vec<f64>,
    pub centered: Vec<f64>,
    pub normalized: Vec<f64>,
    pub clipped: Vec<f64>,
    pub sigma: f64,
}

pub fn normalize_advantages(rewards: &[f64], c_clip: f64, eps: f64) -> Result<AdvantageBatch> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("advantages of an empty batch".into()));
    }
    let n = rewards.len() as f64;
    // Centering on r_0 first makes the result exactly shift invariant
    // whenever the differences r_i - r_0 are exact.
    let r0 = rewards[0];
    let offsets: Vec<f64> = rewards.iter().map(|r| r - r0).collect();
    let mean_offset = offsets.iter().sum::<f64>() / n;
    let centered: Vec<f64> = offsets.iter().map(|d| d - mean_offset).collect();
    let sigma = (centered.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let normalized: Vec<f64> = centered.iter().map(|a| a / (sigma + eps)).collect();
    let clipped = normalized.iter().map(|a| a.clamp(-c_clip, c_clip)).collect();
    Ok(AdvantageBatch {
        rewards: rewards.to_vec(),
        centered,
        normalized,
        clipped,
        sigma,
    })
}

/// NTP with each sample's weight scaled by `1 + lambda * A_i`.
pub fn rft_loss_and_grad(params: &ScorerParams, batch: &[&Sample], advantages: &[f64], lambda: f64) -> Result<(f64, Trainable)> {
    if advantages.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} advantages for {} samples",
            advantages.len(),
            batch.len()
        )));
    }
    let steps = params.num_steps();
    let items = batch
        .iter()
        .zip(advantages)
        .map(|(s, a)| {
            let scale = 1.0 + lambda * a;
            if scale <= 0.0 {
                return Err(Error::Config(format!(
                    "reweighting 1 + {lambda} * {a} is not positive; lower lambda or c_clip"
                )));
            }
            Ok((*s, vec![scale * s.alpha; steps]))
        })
        .collect::<Result<Vec<_>>>()?;
    params.weighted_nll_and_grad(&items)
}

/// 2 = purchased, 1 = clicked, 0 = exposed only.
pub fn preference_level(event: &Event) -> u8 {
    event.level.min(2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub request_id: String,
    pub winner: u64,
    pub loser: u64,
    pub winner_level: u8,
    pub loser_level: u8,
    pub winner_rank: u32,
    pub loser_rank: u32,
}

/// Every ordered preference pair of one request, in (winner position,
/// loser position) order.
pub fn request_pairs(request_id: &str, events: &[Event]) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for w in events {
        for l in events {
            let (lw, ll) = (preference_level(w), preference_level(l));
            let preferred = lw > ll || (lw == ll && w.exposure_rank < l.exposure_rank);
            if preferred && w.item_id != l.item_id {
                out.push(PreferencePair {
                    request_id: request_id.to_string(),
                    winner: w.item_id,
                    loser: l.item_id,
                    winner_level: lw,
                    loser_level: ll,
                    winner_rank: w.exposure_rank,
                    loser_rank: l.exposure_rank,
                });
            }
        }
    }
    out
}

/// Per request, all eligible pairs or a seeded sample of `per_request_cap`
/// of them (kept in enumeration order).
pub fn build_dpo_pairs(log: &InteractionLog, per_request_cap: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    if log.requests.is_empty() {
        return Err(Error::InvalidInput("preference pairs need a non-empty log".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for req in &log.requests {
        let all = request_pairs(&req.request_id, &req.events);
        if all.len() <= per_request_cap {
            out.extend(all);
        } else {
            let mut keep = rand::seq::index::sample(&mut rng, all.len(), per_request_cap).into_vec();
            keep.sort_unstable();
            out.extend(keep.into_iter().map(|i| all[i].clone()));
        }
    }
    Ok(out)
}

/// Which steps of a DPO sequence receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpoTarget {
    /// Stop-gradient on every step but the final SID layer.
    #[default]
    LastSid,
    AllSteps,
}

impl std::str::FromStr for DpoTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-sid" => Ok(DpoTarget::LastSid),
            "all-steps" => Ok(DpoTarget::AllSteps),
            other => Err(Error::Unknown {
                kind: "dpo target",
                value: other.to_string(),
            }),
        }
    }
}

/// A preference pair materialized as two samples sharing one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoExample {
    pub winner: Sample,
    pub loser: Sample,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-mean log sigmoid(beta * (winner log-ratio - loser log-ratio))` against
/// the frozen `reference`. An empty pair set has loss 0.
pub fn dpo_loss_and_grad(
    params: &ScorerParams,
    reference: &ScorerParams,
    pairs: &[DpoExample],
    beta: f64,
    target: DpoTarget,
) -> Result<(f64, Trainable)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if pairs.is_empty() {
        return Ok((0.0, params.trainable.zeros_like()));
    }
    let steps = params.num_steps();
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut items = Vec::with_capacity(2 * pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let label = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "pair {i} ({}: item {} over {}): {what}",
                pair.winner.request_id, pair.winner.target.item_id, pair.loser.target.item_id
            )),
            other => other,
        };
        let seq_lp = |p: &ScorerParams, s: &Sample| -> Result<f64> {
            Ok(p.sequence_logprobs(s).map_err(label)?.iter().sum())
        };
        let ratio_w = seq_lp(params, &pair.winner)? - seq_lp(reference, &pair.winner)?;
        let ratio_l = seq_lp(params, &pair.loser)? - seq_lp(reference, &pair.loser)?;
        let z = beta * (ratio_w - ratio_l);
        loss -= log_sigmoid(z);
        // d loss / d log pi(winner) = -beta * sigmoid(-z) / n
        let c = beta * sigmoid(-z) / n;
        let coefs = |sign: f64| -> Vec<f64> {
            match target {
                DpoTarget::AllSteps => vec![sign * c; steps],
                DpoTarget::LastSid => {
                    let mut v = vec![0.0; steps];
                    v[steps - 1] = sign * c;
                    v
                }
            }
        };
        items.push((&pair.winner, coefs(1.0)));
        items.push((&pair.loser, coefs(-1.0)));
    }
    let (_, grads) = params.weighted_nll_and_grad(&items)?;
    Ok((loss / n, grads))
}

/// `rft_scale * L_RFT + lambda_dpo * L_DPO`. The DPO term is skipped when
/// `lambda_dpo` is 0 or there are no pairs.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_scaled(
    params: &ScorerParams,
    reference: &ScorerParams,
    batch: &[&Sample],
    advantages: &[f64],
    lambda: f64,
    rft_scale: f64,
    pairs: &[DpoExample],
    beta: f64,
    target: DpoTarget,
    lambda_dpo: f64,
) -> Result<(f64, Trainable)> {
    let (mut loss, mut grads) = rft_loss_and_grad(params, batch, advantages, lambda)?;
    if rft_scale != 1.0 {
        loss *= rft_scale;
        grads.scale(rft_scale);
    }
    if lambda_dpo != 0.0 && !pairs.is_empty() {
        let (dpo, dpo_grads) = dpo_loss_and_grad(params, reference, pairs, beta, target)?;
        loss += lambda_dpo * dpo;
        grads.add_scaled(&dpo_grads, lambda_dpo);
    }
    Ok((loss, grads))
}

/// `L_RFT + lambda_dpo * L_DPO`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    params: &ScorerParams,
    reference: &ScorerParams,
    batch: &[&Sample],
    advantages: &[f64],
    lambda: f64,
    pairs: &[DpoExample],
    beta: f64,
    target: DpoTarget,
    lambda_dpo: f64,
) -> Result<(f64, Trainable)> {
    joint_loss_scaled(params, reference, batch, advantages, lambda, 1.0, pairs, beta, target, lambda_dpo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOptions {
    pub reward: RewardSpec,
    pub beta: f64,
    /// Loss weights; the DPO term enters as `lambda_dpo / lambda_rft`.
    pub lambda_rft: f64,
    pub lambda_dpo: f64,
    pub pairs_per_request: usize,
    pub dpo_target: DpoTarget,
    pub epochs: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            reward: RewardSpec::default(),
            beta: 0.1,
            lambda_rft: 20.0,
            lambda_dpo: 3.0,
            pairs_per_request: 4,
            dpo_target: DpoTarget::LastSid,
            epochs: 1,
        }
    }
}

impl AlignOptions {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if !(self.beta > 0.0 && self.lambda_rft > 0.0 && self.lambda_dpo >= 0.0) {
            return Err(Error::Config("alignment needs beta > 0, lambda_rft > 0, lambda_dpo >= 0".into()));
        }
        if 1.0 - self.reward.lambda * self.reward.c_clip <= 0.0 {
            return Err(Error::Config(format!(
                "lambda * c_clip = {} must stay below 1",
                self.reward.lambda * self.reward.c_clip
            )));
        }
        Ok(())
    }

    pub fn dpo_weight(&self) -> f64 {
        self.lambda_dpo / self.lambda_rft
    }
}

/// One alignment epoch. Samples are shuffled into batches; the shuffled
/// pair list is spread evenly over the batches. Each batch minimizes the
/// batch-mean RFT loss plus the weighted DPO loss of its pairs.
pub fn align_epoch(
    params: &mut ScorerParams,
    reference: &ScorerParams,
    opt: &mut AdamW,
    samples: &[Sample],
    pairs: &[DpoExample],
    opts: &AlignOptions,
    epoch: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot align on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.cfg.seed.wrapping_add(epoch));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut pair_order: Vec<usize> = (0..pairs.len()).collect();
    pair_order.shuffle(&mut rng);
    let batches: Vec<&[usize]> = order.chunks(opt.cfg.batch_size).collect();
    let nb = batches.len();
    let mut trace = Vec::with_capacity(nb);
    for (b, idx) in batches.into_iter().enumerate() {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let lo = b * pairs.len() / nb;
        let hi = (b + 1) * pairs.len() / nb;
        let batch_pairs: Vec<DpoExample> = pair_order[lo..hi].iter().map(|&i| pairs[i].clone()).collect();
        let rewards = batch_rewards(&batch, &opts.reward)?;
        let adv = normalize_advantages(&rewards, opts.reward.c_clip, opts.reward.eps)?;
        let (loss, grads) = joint_loss_scaled(
            params,
            reference,
            &batch,
            &adv.clipped,
            opts.reward.lambda,
            1.0 / batch.len() as f64,
            &batch_pairs,
            opts.beta,
            opts.dpo_target,
            opts.dpo_weight(),
        )
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                batch: b,
                loss: f64::NAN,
                trace: trace.clone(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { batch: b, loss, trace });
        }
        opt.step(params, &grads);
        trace.push(loss);
    }
    Ok(trace)
}
