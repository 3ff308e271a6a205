use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

/// Additively smoothed prefix counts:
/// `p(s_t | s_<t) = (count(prefix, s_t) + kappa) / (count(prefix) + kappa * V_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountScorer {
    step_vocab: Vec<usize>,
    kappa: f64,
    counts: BTreeMap<Vec<u32>, Vec<u64>>,
}

impl CountScorer {
    pub fn fit(sequences: &[TokenSequence], step_vocab: &[usize], kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("smoothing must be finite and >= 0, got {kappa}")));
        }
        let mut counts: BTreeMap<Vec<u32>, Vec<u64>> = BTreeMap::new();
        for seq in sequences {
            let tokens = seq.steps();
            if tokens.len() != step_vocab.len() {
                return Err(Error::Dimension(format!(
                    "sequence for item {} has {} steps, expected {}",
                    seq.item_id,
                    tokens.len(),
                    step_vocab.len()
                )));
            }
            for (t, &tok) in tokens.iter().enumerate() {
                if tok as usize >= step_vocab[t] {
                    return Err(Error::InvalidInput(format!(
                        "token {tok} outside step {} vocabulary",
                        t + 1
                    )));
                }
                counts.entry(tokens[..t].to_vec()).or_insert_with(|| vec![0; step_vocab[t]])[tok as usize] += 1;
            }
        }
        Ok(Self {
            step_vocab: step_vocab.to_vec(),
            kappa,
            counts,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.step_vocab.len()
    }

    /// Log-probabilities over the vocabulary of step `prefix.len() + 1`.
    pub fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let step = prefix.len() + 1;
        let v = *self.step_vocab.get(prefix.len()).ok_or_else(|| {
            Error::InvalidInput(format!("step {step} outside 1..={}", self.num_steps()))
        })?;
        let (row, total) = match self.counts.get(prefix) {
            Some(c) => (Some(c), c.iter().sum::<u64>()),
            None => (None, 0),
        };
        let denom = total as f64 + self.kappa * v as f64;
        if denom == 0.0 {
            return Err(Error::Undefined(format!("unseen prefix {prefix:?} with zero smoothing")));
        }
        Ok((0..v)
            .map(|i| {
                let c = row.map_or(0, |r| r[i]) as f64;
                ((c + self.kappa) / denom).ln()
            })
            .collect())
    }

    pub fn logprob(&self, seq: &TokenSequence) -> Result<f64> {
        let tokens = seq.steps();
        if tokens.len() != self.num_steps() {
            return Err(Error::Dimension(format!(
                "sequence has {} steps, scorer has {}",
                tokens.len(),
                self.num_steps()
            )));
        }
        let mut total = 0.0;
        for t in 0..tokens.len() {
            let lp = self.step_logprobs(&tokens[..t])?;
            total += *lp.get(tokens[t] as usize).ok_or_else(|| {
                Error::InvalidInput(format!("token {} outside step {} vocabulary", tokens[t], t + 1))
            })?;
        }
        Ok(total)
    }
}
