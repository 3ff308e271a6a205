//! Token Hit Ratio@3 under teacher forcing and beam-search Hit Ratio@K.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::exposure_concentration;
use crate::config::RunConfig;
use crate::corpus::{AttrField, InteractionLog, ItemCorpus};
use crate::dataset::{build_dataset, item_sequences};
use crate::decoder::{beam_search, build_trie, PathTrie, SampleScorer};
use crate::error::{Error, Result};
use crate::pipeline::{eval_options, init_scorer, layout_for, quantize_corpus, sid_weights, train_ntp};
use crate::quantizer::RqOutput;
use crate::scorer::Sample;
use crate::tokenizer::SequenceLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetFilter {
    All,
    Orders,
}

impl SubsetFilter {
    pub fn keeps(self, sample: &Sample) -> bool {
        match self {
            SubsetFilter::All => true,
            SubsetFilter::Orders => sample.is_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepHit {
    pub step: usize,
    pub name: String,
    pub hr3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitAtK {
    pub k: usize,
    pub all: f64,
    /// `None` when the eval set holds no order samples.
    pub orders: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_hr3: Vec<StepHit>,
    pub token_hr3_mean: f64,
    pub hr_at: Vec<HitAtK>,
    pub n_samples: usize,
    pub n_orders: usize,
    pub beam_width: usize,
    pub config_digest: Option<String>,
    pub seed: u64,
}

impl EvalReport {
    pub fn step_hr3(&self, name: &str) -> Option<f64> {
        self.token_hr3.iter().find(|s| s.name == name).map(|s| s.hr3)
    }
}

/// Display names of the decoded steps, e.g. `["l2", "l3", "s0", "s1"]`.
pub fn step_names(layout: &SequenceLayout) -> Vec<String> {
    layout
        .attr_chain
        .iter()
        .map(|f| f.name().to_string())
        .chain((0..layout.num_layers).map(|l| format!("s{l}")))
        .collect()
}

/// True when `target` is among the three highest entries; ties go to the
/// lower token index.
fn in_top3(logprobs: &[f64], target: usize) -> bool {
    let t = logprobs[target];
    let ahead = logprobs
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count();
    ahead < 3
}

/// Per-step fraction of samples whose ground-truth token ranks in the top 3
/// under teacher forcing.
pub fn token_hr3(scorer: &dyn SampleScorer, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("token_hr3 needs a non-empty eval set".into()));
    }
    let hits: Vec<Vec<bool>> = samples
        .par_iter()
        .map(|s| -> Result<Vec<bool>> {
            let model = scorer.condition(s)?;
            let tokens = s.target.steps();
            if tokens.len() != model.num_steps() {
                return Err(Error::Dimension(format!(
                    "sample has {} steps, scorer decodes {}",
                    tokens.len(),
                    model.num_steps()
                )));
            }
            (0..tokens.len())
                .map(|i| {
                    let lp = model.step_logprobs(&tokens[..i])?;
                    let tok = tokens[i] as usize;
                    if tok >= lp.len() {
                        return Err(Error::Dimension(format!("token {tok} outside step {} vocabulary", i + 1)));
                    }
                    Ok(in_top3(&lp, tok))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n_steps = hits[0].len();
    let mut counts = vec![0usize; n_steps];
    for h in &hits {
        for (c, &hit) in counts.iter_mut().zip(h) {
            *c += hit as usize;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / samples.len() as f64).collect())
}

/// Rank (0-based) of the first beam candidate whose leaf set holds the
/// sample's target item, if any.
fn hit_rank(
    scorer: &dyn SampleScorer,
    trie: &PathTrie,
    sample: &Sample,
    width: usize,
    top_k: usize,
) -> Result<Option<usize>> {
    let model = scorer.condition(sample)?;
    let cands = beam_search(model.as_ref(), trie, width, top_k)?;
    Ok(cands.iter().position(|c| c.item_ids.contains(&sample.target.item_id)))
}

/// Fraction of filtered samples whose target item is resolved from the top-K
/// beam candidates. Returns `None` when the filter keeps no sample.
pub fn bs_hit_ratio(
    scorer: &dyn SampleScorer,
    trie: &PathTrie,
    samples: &[Sample],
    k: usize,
    width: usize,
    filter: SubsetFilter,
) -> Result<Option<f64>> {
    let kept: Vec<&Sample> = samples.iter().filter(|s| filter.keeps(s)).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let ranks: Vec<Option<usize>> = kept
        .par_iter()
        .map(|s| hit_rank(scorer, trie, s, width.max(k), k))
        .collect::<Result<_>>()?;
    let hits = ranks.iter().filter(|r| r.is_some()).count();
    Ok(Some(hits as f64 / kept.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub beam_width: usize,
    pub config_digest: Option<String>,
    pub seed: u64,
}

/// Full report. One beam of width max(B, max K) is run per sample and every
/// K is read off its ranked list.
pub fn evaluate(
    scorer: &dyn SampleScorer,
    trie: &PathTrie,
    layout: &SequenceLayout,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let k_max = *opts
        .ks
        .iter()
        .max()
        .ok_or_else(|| Error::Config("eval.ks must not be empty".into()))?;
    if opts.ks.contains(&0) {
        return Err(Error::Config("eval.ks entries must be >= 1".into()));
    }
    let hr3 = token_hr3(scorer, samples)?;
    let width = opts.beam_width.max(k_max);
    let ranks: Vec<Option<usize>> = samples
        .par_iter()
        .map(|s| hit_rank(scorer, trie, s, width, k_max))
        .collect::<Result<_>>()?;
    let n_orders = samples.iter().filter(|s| s.is_order).count();
    let mut ks = opts.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let hr_at = ks
        .iter()
        .map(|&k| {
            let hit = |r: &Option<usize>| r.is_some_and(|r| r < k) as usize;
            let all: usize = ranks.iter().map(hit).sum();
            let orders: usize = samples
                .iter()
                .zip(&ranks)
                .filter(|(s, _)| s.is_order)
                .map(|(_, r)| hit(r))
                .sum();
            HitAtK {
                k,
                all: all as f64 / samples.len() as f64,
                orders: (n_orders > 0).then(|| orders as f64 / n_orders as f64),
            }
        })
        .collect();
    let names = step_names(layout);
    if names.len() != hr3.len() {
        return Err(Error::Dimension(format!(
            "layout names {} steps, scorer decodes {}",
            names.len(),
            hr3.len()
        )));
    }
    let mean = hr3.iter().sum::<f64>() / hr3.len() as f64;
    Ok(EvalReport {
        token_hr3: names
            .into_iter()
            .zip(hr3)
            .enumerate()
            .map(|(i, (name, hr3))| StepHit { step: i + 1, name, hr3 })
            .collect(),
        token_hr3_mean: mean,
        hr_at,
        n_samples: samples.len(),
        n_orders,
        beam_width: width,
        config_digest: opts.config_digest.clone(),
        seed: opts.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Capacity,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub attr_chain: Vec<AttrField>,
    pub quantizer: QuantizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: AblationArm,
    /// Exposure share of the top 1% of full-depth SID combinations.
    pub top1pct_share: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    pub config_digest: String,
    pub seed: u64,
}

/// Attribute chains {[], [l1], [l2], [l3], [l2, l3]} crossed with both
/// quantizers.
pub fn default_grid() -> Vec<AblationArm> {
    let chains = [
        vec![],
        vec![AttrField::L1],
        vec![AttrField::L2],
        vec![AttrField::L3],
        vec![AttrField::L2, AttrField::L3],
    ];
    [QuantizerKind::Capacity, QuantizerKind::Baseline]
        .into_iter()
        .flat_map(|q| {
            chains.iter().map(move |c| AblationArm {
                attr_chain: c.clone(),
                quantizer: q,
            })
        })
        .collect()
}

/// Trains and evaluates one NTP scorer per arm with the same seed, epochs and
/// optimizer settings.
pub fn ablation_run(
    cfg: &RunConfig,
    corpus: &ItemCorpus,
    log: &InteractionLog,
    grid: &[AblationArm],
) -> Result<AblationReport> {
    let mut quantized: Vec<(QuantizerKind, RqOutput)> = Vec::new();
    let mut arms = Vec::with_capacity(grid.len());
    for arm in grid {
        let mut arm_cfg = cfg.clone();
        arm_cfg.tokenizer.attr_chain = arm.attr_chain.clone();
        if arm.quantizer == QuantizerKind::Baseline {
            arm_cfg.quantizer.tau = None;
        }
        if !quantized.iter().any(|(k, _)| *k == arm.quantizer) {
            quantized.push((arm.quantizer, quantize_corpus(&arm_cfg, corpus)?));
        }
        let rq = &quantized.iter().find(|(k, _)| *k == arm.quantizer).expect("quantized above").1;
        let layout = layout_for(&arm_cfg, corpus)?;
        let ds = build_dataset(
            corpus,
            &rq.sids,
            log,
            &layout,
            &arm_cfg.tokenizer.registry,
            &arm_cfg.dataset_options(),
        )?;
        let trie = build_trie(&item_sequences(corpus, &rq.sids, &layout)?)?;
        let mut params = init_scorer(&arm_cfg, &layout, corpus)?;
        train_ntp(&arm_cfg, &mut params, &ds.train)?;
        let report = evaluate(&params, &trie, &layout, &ds.eval, &eval_options(cfg))?;
        let weights = sid_weights(corpus, &rq.sids)?;
        arms.push(ArmResult {
            arm: arm.clone(),
            top1pct_share: exposure_concentration(&rq.sids, &weights, cfg.quantizer.layers, 0.01)?,
            report,
        });
    }
    Ok(AblationReport {
        arms,
        config_digest: cfg.digest(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tests::{exhaustive, seq, RandomModel};
    use crate::decoder::StepModel;
    use crate::tokenizer::TokenSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn sample(target: TokenSequence, is_order: bool) -> Sample {
        Sample {
            request_id: String::new(),
            behavior: Vec::new(),
            target,
            alpha: 1.0,
            is_order,
            metrics: BTreeMap::new(),
        }
    }

    /// Ignores the sample and always returns the same step model.
    struct Fixed(RandomModel);

    impl SampleScorer for Fixed {
        fn condition<'a>(&'a self, _s: &Sample) -> Result<Box<dyn StepModel + 'a>> {
            Ok(Box::new(self.0.clone()))
        }
    }

    /// Puts all mass on the sample's own target tokens.
    struct Oracle {
        vocab: Vec<usize>,
    }

    struct OracleModel {
        vocab: Vec<usize>,
        tokens: Vec<u32>,
    }

    impl StepModel for OracleModel {
        fn num_steps(&self) -> usize {
            self.vocab.len()
        }
        fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let i = prefix.len();
            let mut lp = vec![f64::NEG_INFINITY; self.vocab[i]];
            lp[self.tokens[i] as usize] = 0.0;
            Ok(lp)
        }
    }

    impl SampleScorer for Oracle {
        fn condition<'a>(&'a self, s: &Sample) -> Result<Box<dyn StepModel + 'a>> {
            Ok(Box::new(OracleModel {
                vocab: self.vocab.clone(),
                tokens: s.target.steps(),
            }))
        }
    }

    #[test]
    fn top3_ties_go_to_lower_index() {
        assert!(in_top3(&[0.0, 0.0, 0.0, 0.0], 2));
        assert!(!in_top3(&[0.0, 0.0, 0.0, 0.0], 3));
        assert!(in_top3(&[-1.0, -5.0], 1));
        assert!(!in_top3(&[1.0, 2.0, 3.0, 0.5], 3));
    }

    #[test]
    fn perfect_scorer_hits_everywhere() {
        let vocab = vec![5, 7, 6];
        let samples: Vec<Sample> = (0..30).map(|i| sample(seq(i, &[i as u32 % 5, i as u32 % 7, i as u32 % 6]), i % 2 == 0)).collect();
        let trie = build_trie(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>()).unwrap();
        let oracle = Oracle { vocab };
        assert_eq!(token_hr3(&oracle, &samples).unwrap(), vec![1.0; 3]);
        for f in [SubsetFilter::All, SubsetFilter::Orders] {
            assert_eq!(bs_hit_ratio(&oracle, &trie, &samples, 1, 1, f).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn small_vocab_step_is_always_a_hit() {
        let model = Fixed(RandomModel { vocab: vec![3, 9], seed: 4, sharpness: 2.0 });
        let samples: Vec<Sample> = (0..40).map(|i| sample(seq(i, &[i as u32 % 3, i as u32 % 9]), false)).collect();
        let hr = token_hr3(&model, &samples).unwrap();
        assert_eq!(hr[0], 1.0);
        assert!(hr[1] < 1.0);
        assert!(token_hr3(&model, &[]).is_err());
    }

    #[test]
    fn uniform_scorer_hits_within_binomial_bound() {
        // One fixed random distribution, targets drawn uniformly.
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Sample> = (0..n).map(|i| sample(seq(i, &[rng.random_range(0..30)]), false)).collect();
        let model = Fixed(RandomModel { vocab: vec![30], seed: 11, sharpness: 1.0 });
        let hr = token_hr3(&model, &samples).unwrap()[0];
        let p = 0.1;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hr - p).abs() < 3.0 * sigma, "hr {hr}, bound {}", 3.0 * sigma);
    }

    #[test]
    fn everything_is_retrieved_at_full_width() {
        let model = Fixed(RandomModel { vocab: vec![3, 3, 2], seed: 8, sharpness: 2.0 });
        let samples: Vec<Sample> = (0..18).map(|i| sample(seq(i, &[i as u32 % 3, (i / 3) as u32 % 3, (i / 9) as u32]), false)).collect();
        let trie = build_trie(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(bs_hit_ratio(&model, &trie, &samples, trie.num_paths(), trie.num_paths(), SubsetFilter::All).unwrap(), Some(1.0));
        // an item missing from the trie never hits
        let stray = vec![sample(seq(999, &[0, 0, 0]), false)];
        assert_eq!(bs_hit_ratio(&model, &trie, &stray, 18, 18, SubsetFilter::All).unwrap(), Some(0.0));
        assert_eq!(bs_hit_ratio(&model, &trie, &stray, 18, 18, SubsetFilter::Orders).unwrap(), None);
    }

    #[test]
    fn hit_ratio_matches_brute_force_ranking() {
        let vocab = vec![4, 5, 10];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let seqs: Vec<TokenSequence> = (0..200u64)
            .map(|i| seq(i, &[rng.random_range(0..4), rng.random_range(0..5), rng.random_range(0..10)]))
            .collect();
        let trie = build_trie(&seqs).unwrap();
        let model = RandomModel { vocab, seed: 3, sharpness: 1.5 };
        let ranked = exhaustive(&model, &trie);
        let samples: Vec<Sample> = seqs.iter().map(|s| sample(s.clone(), s.item_id % 3 == 0)).collect();
        let scorer = Fixed(model);
        for k in [1, 5, 20, 60] {
            for f in [SubsetFilter::All, SubsetFilter::Orders] {
                let kept: Vec<&Sample> = samples.iter().filter(|s| f.keeps(s)).collect();
                let top: Vec<u64> = ranked.iter().take(k).flat_map(|c| c.item_ids.clone()).collect();
                let want = kept.iter().filter(|s| top.contains(&s.target.item_id)).count() as f64 / kept.len() as f64;
                let got = bs_hit_ratio(&scorer, &trie, &samples, k, trie.num_paths(), f).unwrap().unwrap();
                assert_eq!(got, want, "k {k} {f:?}");
            }
        }
    }

    #[test]
    fn report_is_monotone_in_k_and_filter_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = crate::scorer::tests::tiny_layout(&[3, 4, 6, 6], 2);
        let scorer = Fixed(RandomModel { vocab: layout.step_vocab.clone(), seed: 4, sharpness: 1.0 });
        let seqs: Vec<TokenSequence> = (0..80u64)
            .map(|i| {
                let toks: Vec<u32> = layout.step_vocab.iter().map(|&v| rng.random_range(0..v as u32)).collect();
                seq(i, &toks)
            })
            .collect();
        let trie = build_trie(&seqs).unwrap();
        let all_orders: Vec<Sample> = seqs.iter().map(|s| sample(s.clone(), true)).collect();
        let opts = EvalOptions {
            ks: vec![10, 1, 5],
            beam_width: 4,
            config_digest: Some("d".into()),
            seed: 9,
        };
        let rep = evaluate(&scorer, &trie, &layout, &all_orders, &opts).unwrap();
        assert_eq!(rep.hr_at.iter().map(|h| h.k).collect::<Vec<_>>(), vec![1, 5, 10]);
        assert!(rep.hr_at.windows(2).all(|w| w[0].all <= w[1].all));
        assert!(rep.hr_at.iter().all(|h| h.orders == Some(h.all)));
        assert_eq!(rep.n_orders, rep.n_samples);
        assert_eq!(rep.beam_width, 10);
        assert!(rep.token_hr3.iter().all(|s| (0.0..=1.0).contains(&s.hr3)));
    }

    #[test]
    fn identical_arms_give_identical_reports() {
        let cfg = crate::pipeline::tests::small_config();
        let synth = cfg.synth();
        let corpus = crate::corpus::generate_corpus(&synth).unwrap();
        let log = crate::corpus::generate_interactions(&corpus, &synth).unwrap();
        let arm = AblationArm {
            attr_chain: vec![AttrField::L2],
            quantizer: QuantizerKind::Capacity,
        };
        let rep = ablation_run(&cfg, &corpus, &log, &[arm.clone(), arm]).unwrap();
        assert_eq!(rep.arms[0], rep.arms[1]);
        let rep = ablation_run(&cfg, &corpus, &log, &default_grid()[..2]).unwrap();
        assert_eq!(rep.arms[0].report.token_hr3.len(), 2);
        assert_eq!(rep.arms[1].report.token_hr3[0].name, "l1");
    }
}
