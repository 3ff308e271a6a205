//! Turns a corpus, its semantic IDs and an interaction log into scorer
//! samples: per-item token sequences, request contexts and the train/eval
//! split.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::alignment::{engagement_weight, DpoExample, PreferencePair};
use crate::corpus::{InteractionLog, ItemCorpus};
use crate::error::{Error, Result};
use crate::quantizer::SemanticId;
use crate::scorer::Sample;
use crate::tokenizer::{build_sequence, task_bos_token, SequenceLayout, TaskContext, TaskRegistry, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    /// Maximum behavior-sequence length.
    pub behavior_len: usize,
    /// Fraction of requests (latest by request_id) held out for evaluation.
    pub eval_fraction: f64,
    pub alpha_cap: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            behavior_len: 8,
            eval_fraction: 0.1,
            alpha_cap: 10.0,
        }
    }
}

/// User context shared by every sample of one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub behavior: Vec<usize>,
    pub bos: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub contexts: BTreeMap<String, RequestContext>,
}

/// One token sequence per corpus item (BOS 0), in corpus order.
pub fn item_sequences(corpus: &ItemCorpus, sids: &[SemanticId], layout: &SequenceLayout) -> Result<Vec<TokenSequence>> {
    let by_id: HashMap<u64, &SemanticId> = sids.iter().map(|s| (s.item_id, s)).collect();
    corpus
        .items()
        .iter()
        .map(|item| {
            let sid = by_id.get(&item.item_id).ok_or_else(|| Error::Unknown {
                kind: "semantic id for item",
                value: item.item_id.to_string(),
            })?;
            build_sequence(layout, corpus.vocab(), item, sid, 0)
        })
        .collect()
}

/// Splits the log into (train, eval): the last `eval_fraction` of requests
/// by request_id are held out.
pub fn split_log(log: &InteractionLog, eval_fraction: f64) -> Result<(InteractionLog, InteractionLog)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!("eval_fraction must lie in [0, 1), got {eval_fraction}")));
    }
    let mut requests = log.requests.clone();
    requests.sort_by(|a, b| a.request_id.cmp(&b.request_id));
    let n_eval = ((requests.len() as f64 * eval_fraction).round() as usize).min(requests.len());
    let eval = requests.split_off(requests.len() - n_eval);
    Ok((InteractionLog { requests }, InteractionLog { requests: eval }))
}

pub fn build_dataset(
    corpus: &ItemCorpus,
    sids: &[SemanticId],
    log: &InteractionLog,
    layout: &SequenceLayout,
    registry: &TaskRegistry,
    opts: &DatasetOptions,
) -> Result<Dataset> {
    log.validate(corpus)?;
    let sequences = item_sequences(corpus, sids, layout)?;
    let position = corpus.position_of();
    let mean_gmv = corpus.mean_gmv();
    let (train_log, eval_log) = split_log(log, opts.eval_fraction)?;
    let n_train = train_log.requests.len();

    let mut history: HashMap<&str, VecDeque<usize>> = HashMap::new();
    let mut contexts = BTreeMap::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (r, req) in train_log.requests.iter().chain(&eval_log.requests).enumerate() {
        let bos = task_bos_token(registry, &TaskContext::new(req.objective.as_str(), req.scene.as_str()))?;
        let past = history.entry(req.user_id.as_str()).or_default();
        let behavior: Vec<usize> = past.iter().copied().collect();
        let watch_time = req.reward_metrics.get("watch_time").copied().unwrap_or(0.0);
        for ev in req.events.iter().filter(|e| e.level >= 1) {
            let pos = position[&ev.item_id];
            let item = &corpus.items()[pos];
            let is_order = ev.level >= 2;
            let mut target = sequences[pos].clone();
            target.bos = bos;
            let sample = Sample {
                request_id: req.request_id.clone(),
                behavior: behavior.clone(),
                target,
                alpha: engagement_weight(is_order, item.gmv, mean_gmv, opts.alpha_cap),
                is_order,
                metrics: BTreeMap::from([
                    ("gmv".to_string(), if is_order { item.gmv } else { 0.0 }),
                    ("watch_time".to_string(), watch_time),
                ]),
            };
            if r < n_train {
                train.push(sample);
            } else {
                eval.push(sample);
            }
        }
        for ev in req.events.iter().filter(|e| e.level >= 1) {
            past.push_back(position[&ev.item_id]);
            if past.len() > opts.behavior_len {
                past.pop_front();
            }
        }
        contexts.insert(req.request_id.clone(), RequestContext { behavior, bos });
    }
    Ok(Dataset { train, eval, contexts })
}

/// Materializes preference pairs as winner/loser samples in their request
/// context.
pub fn dpo_examples(
    dataset: &Dataset,
    pairs: &[PreferencePair],
    corpus: &ItemCorpus,
    sids: &[SemanticId],
    layout: &SequenceLayout,
) -> Result<Vec<DpoExample>> {
    let sequences = item_sequences(corpus, sids, layout)?;
    let position = corpus.position_of();
    let sample = |pair: &PreferencePair, item_id: u64, ctx: &RequestContext| -> Result<Sample> {
        let pos = *position.get(&item_id).ok_or_else(|| Error::Unknown {
            kind: "item_id",
            value: item_id.to_string(),
        })?;
        let mut target = sequences[pos].clone();
        target.bos = ctx.bos;
        Ok(Sample {
            request_id: pair.request_id.clone(),
            behavior: ctx.behavior.clone(),
            target,
            alpha: 1.0,
            is_order: false,
            metrics: BTreeMap::new(),
        })
    };
    pairs
        .iter()
        .map(|p| {
            let ctx = dataset.contexts.get(&p.request_id).ok_or_else(|| Error::Unknown {
                kind: "request_id",
                value: p.request_id.clone(),
            })?;
            Ok(DpoExample {
                winner: sample(p, p.winner, ctx)?,
                loser: sample(p, p.loser, ctx)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, generate_interactions, AttrField, SynthConfig};
    use crate::quantizer::{capacity_constrained_rq, RqOptions};

    fn fixture() -> (ItemCorpus, Vec<SemanticId>, InteractionLog, SequenceLayout) {
        let cfg = SynthConfig {
            n_items: 120,
            d_emb: 4,
            n_clusters_true: 8,
            n_requests: 200,
            events_per_request: 4,
            n_users: 20,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let log = generate_interactions(&corpus, &cfg).unwrap();
        let sids = capacity_constrained_rq(&corpus, &RqOptions::new(2, 4, Some(1.2), 1)).unwrap().sids;
        let layout = SequenceLayout::new(&[AttrField::L2], corpus.vocab(), 2, 4).unwrap();
        (corpus, sids, log, layout)
    }

    #[test]
    fn split_is_by_request_id() {
        let (_, _, log, _) = fixture();
        let (train, eval) = split_log(&log, 0.1).unwrap();
        assert_eq!(eval.requests.len(), 20);
        assert_eq!(train.requests.len(), 180);
        let last_train = &train.requests.last().unwrap().request_id;
        assert!(eval.requests.iter().all(|r| r.request_id > *last_train));
        assert!(split_log(&log, 1.0).is_err());
    }

    #[test]
    fn samples_are_engaged_events_with_causal_history() {
        let (corpus, sids, log, layout) = fixture();
        let reg = TaskRegistry::default();
        let ds = build_dataset(&corpus, &sids, &log, &layout, &reg, &DatasetOptions::default()).unwrap();
        let engaged: usize = log.requests.iter().flat_map(|r| &r.events).filter(|e| e.level >= 1).count();
        assert_eq!(ds.train.len() + ds.eval.len(), engaged);
        assert!(ds.train.iter().chain(&ds.eval).all(|s| s.behavior.len() <= 8 && s.alpha >= 1.0));
        assert!(ds.train.iter().chain(&ds.eval).all(|s| s.is_order == (s.metrics["gmv"] > 0.0) || s.metrics["gmv"] == 0.0));
        // the first request of every user has an empty history
        let mut seen = std::collections::HashSet::new();
        let mut sorted = log.requests.clone();
        sorted.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        for req in &sorted {
            if seen.insert(req.user_id.clone()) {
                assert!(ds.contexts[&req.request_id].behavior.is_empty());
            }
        }
        let pairs = crate::alignment::build_dpo_pairs(&log, 2, 3).unwrap();
        let ex = dpo_examples(&ds, &pairs, &corpus, &sids, &layout).unwrap();
        assert_eq!(ex.len(), pairs.len());
        for (e, p) in ex.iter().zip(&pairs) {
            assert_eq!(e.winner.target.item_id, p.winner);
            assert_eq!(e.winner.behavior, e.loser.behavior);
        }
    }
}
