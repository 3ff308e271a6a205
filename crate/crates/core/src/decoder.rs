//! Prefix trie over token paths and trie-constrained beam search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_softmax;
use crate::scorer::{CountScorer, EncodedContext, Sample, ScorerParams};
use crate::tokenizer::TokenSequence;

/// Step distributions of one conditioned decoding problem.
pub trait StepModel {
    fn num_steps(&self) -> usize;

    /// Log-probabilities over the vocabulary of step `prefix.len() + 1`.
    fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Produces a step model conditioned on a sample's user context and task.
pub trait SampleScorer: Sync {
    fn condition<'a>(&'a self, sample: &Sample) -> Result<Box<dyn StepModel + 'a>>;
}

/// The neural scorer with a fixed behavior context and task token.
pub struct ConditionedScorer<'a> {
    params: &'a ScorerParams,
    ctx: EncodedContext,
    bos: u32,
}

impl<'a> ConditionedScorer<'a> {
    pub fn new(params: &'a ScorerParams, behavior: &[usize], bos: u32) -> Result<Self> {
        Ok(Self {
            params,
            ctx: params.encode_context(behavior)?,
            bos,
        })
    }
}

impl StepModel for ConditionedScorer<'_> {
    fn num_steps(&self) -> usize {
        self.params.num_steps()
    }

    fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let step = prefix.len() + 1;
        let state = self.params.step_state(&self.ctx, self.bos, prefix, step)?;
        Ok(log_softmax(&self.params.step_logits(&state, step)?))
    }
}

impl SampleScorer for ScorerParams {
    fn condition<'a>(&'a self, sample: &Sample) -> Result<Box<dyn StepModel + 'a>> {
        Ok(Box::new(ConditionedScorer::new(self, &sample.behavior, sample.target.bos)?))
    }
}

impl StepModel for CountScorer {
    fn num_steps(&self) -> usize {
        CountScorer::num_steps(self)
    }

    fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        CountScorer::step_logprobs(self, prefix)
    }
}

impl SampleScorer for CountScorer {
    fn condition<'a>(&'a self, _sample: &Sample) -> Result<Box<dyn StepModel + 'a>> {
        Ok(Box::new(self.clone()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    children: BTreeMap<u32, usize>,
    items: Vec<u64>,
}

/// Layered prefix tree over full token paths (BOS excluded); leaves hold
/// the items sharing a path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrie {
    num_steps: usize,
    nodes: Vec<Node>,
    n_paths: usize,
    n_items: usize,
}

pub fn build_trie(sequences: &[TokenSequence]) -> Result<PathTrie> {
    let num_steps = sequences.first().map_or(0, |s| s.len() - 1);
    let mut trie = PathTrie {
        num_steps,
        nodes: vec![Node::default()],
        n_paths: 0,
        n_items: 0,
    };
    for seq in sequences {
        let path = seq.steps();
        if path.len() != num_steps {
            return Err(Error::Dimension(format!(
                "item {} has a path of {} steps, expected {num_steps}",
                seq.item_id,
                path.len()
            )));
        }
        let mut node = 0;
        for tok in path {
            node = match trie.nodes[node].children.get(&tok) {
                Some(&c) => c,
                None => {
                    trie.nodes.push(Node::default());
                    let c = trie.nodes.len() - 1;
                    trie.nodes[node].children.insert(tok, c);
                    c
                }
            };
        }
        let leaf = &mut trie.nodes[node].items;
        if leaf.is_empty() {
            trie.n_paths += 1;
        }
        if let Err(pos) = leaf.binary_search(&seq.item_id) {
            leaf.insert(pos, seq.item_id);
            trie.n_items += 1;
        }
    }
    Ok(trie)
}

impl PathTrie {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_paths(&self) -> usize {
        self.n_paths
    }

    pub fn num_items(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_paths == 0
    }

    fn node_of(&self, prefix: &[u32]) -> Option<usize> {
        prefix
            .iter()
            .try_fold(0usize, |node, tok| self.nodes[node].children.get(tok).copied())
    }

    /// Valid next tokens after `prefix`, ascending.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        self.node_of(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Items at a full path; empty when the path is not in the trie.
    pub fn items(&self, path: &[u32]) -> &[u64] {
        match self.node_of(path) {
            Some(n) if path.len() == self.num_steps => &self.nodes[n].items,
            _ => &[],
        }
    }

    pub fn contains(&self, path: &[u32]) -> bool {
        !self.items(path).is_empty()
    }

    /// All full paths with their items, in lexicographic order.
    pub fn paths(&self) -> Vec<(Vec<u32>, Vec<u64>)> {
        let mut out = Vec::with_capacity(self.n_paths);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if path.len() == self.num_steps {
                if !self.nodes[node].items.is_empty() {
                    out.push((path, self.nodes[node].items.clone()));
                }
                continue;
            }
            for (&tok, &child) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(tok);
                stack.push((child, p));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub path: Vec<u32>,
    pub logprob: f64,
    pub item_ids: Vec<u64>,
}

/// Higher log-probability first, then lexicographically smaller path.
pub fn rank_order(a_lp: f64, a_path: &[u32], b_lp: f64, b_path: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_path.cmp(b_path))
}

/// Beam search restricted to trie paths. Scores are unnormalized sums of
/// full-vocabulary step log-probabilities.
pub fn beam_search(model: &dyn StepModel, trie: &PathTrie, width: usize, top_k: usize) -> Result<Vec<Candidate>> {
    if !(width >= top_k && top_k >= 1) {
        return Err(Error::InvalidInput(format!(
            "beam search needs width >= top_k >= 1, got width {width}, top_k {top_k}"
        )));
    }
    if trie.is_empty() {
        return Err(Error::InvalidInput("beam search over an empty trie".into()));
    }
    if model.num_steps() != trie.num_steps() {
        return Err(Error::Dimension(format!(
            "model decodes {} steps, trie paths have {}",
            model.num_steps(),
            trie.num_steps()
        )));
    }
    let mut beams: Vec<(Vec<u32>, f64, usize)> = vec![(Vec::new(), 0.0, 0)];
    for step in 1..=trie.num_steps() {
        let mut next = Vec::new();
        for (path, lp, node) in &beams {
            let step_lp = model.step_logprobs(path)?;
            for (&tok, &child) in &trie.nodes[*node].children {
                let l = *step_lp.get(tok as usize).ok_or_else(|| {
                    Error::Dimension(format!("trie token {tok} outside the step {step} distribution"))
                })?;
                if l.is_nan() {
                    return Err(Error::NonFinite(format!("step {step} log-probability")));
                }
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut p = path.clone();
                p.push(tok);
                next.push((p, lp + l, child));
            }
        }
        next.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        next.truncate(width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .take(top_k)
        .map(|(path, logprob, node)| Candidate {
            path,
            logprob,
            item_ids: trie.nodes[node].items.clone(),
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::hash::{DefaultHasher, Hash, Hasher};

    /// Step distributions drawn from a seeded RNG keyed on the prefix.
    #[derive(Clone)]
    pub(crate) struct RandomModel {
        pub vocab: Vec<usize>,
        pub seed: u64,
        pub sharpness: f64,
    }

    impl StepModel for RandomModel {
        fn num_steps(&self) -> usize {
            self.vocab.len()
        }

        fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let mut h = DefaultHasher::new();
            (self.seed, prefix).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let logits: Vec<f64> = (0..self.vocab[prefix.len()])
                .map(|_| self.sharpness * rng.random::<f64>())
                .collect();
            Ok(log_softmax(&logits))
        }
    }

    pub(crate) fn seq(item_id: u64, tokens: &[u32]) -> TokenSequence {
        TokenSequence {
            item_id,
            bos: 0,
            attrs: vec![],
            sids: tokens.to_vec(),
        }
    }

    fn full_grid(vocab: &[usize]) -> Vec<TokenSequence> {
        let mut paths: Vec<Vec<u32>> = vec![vec![]];
        for &v in vocab {
            paths = paths
                .into_iter()
                .flat_map(|p| {
                    (0..v as u32).map(move |t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        paths.iter().enumerate().map(|(i, p)| seq(i as u64, p)).collect()
    }

    /// Scores every trie path by its exact sequence log-probability.
    pub(crate) fn exhaustive(model: &dyn StepModel, trie: &PathTrie) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = trie
            .paths()
            .into_iter()
            .map(|(path, item_ids)| {
                let logprob = (0..path.len())
                    .map(|t| model.step_logprobs(&path[..t]).unwrap()[path[t] as usize])
                    .sum();
                Candidate { path, logprob, item_ids }
            })
            .filter(|c| c.logprob > f64::NEG_INFINITY)
            .collect();
        all.sort_by(|a, b| rank_order(a.logprob, &a.path, b.logprob, &b.path));
        all
    }

    #[test]
    fn trie_shapes() {
        let one = build_trie(&[seq(1, &[0, 2, 1])]).unwrap();
        assert_eq!((one.num_paths(), one.num_items()), (1, 1));
        assert_eq!(one.paths(), vec![(vec![0, 2, 1], vec![1])]);
        let shared = build_trie(&[seq(1, &[0, 2]), seq(2, &[0, 2])]).unwrap();
        assert_eq!(shared.num_paths(), 1);
        assert_eq!(shared.items(&[0, 2]), &[1, 2]);
        assert!(build_trie(&[seq(1, &[0, 2]), seq(2, &[0])]).is_err());
        assert!(build_trie(&[]).unwrap().is_empty());
    }

    #[test]
    fn trie_conserves_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<_> = (0..1000)
            .map(|i| seq(i, &[rng.random_range(0..4), rng.random_range(0..8), rng.random_range(0..8)]))
            .collect();
        let trie = build_trie(&seqs).unwrap();
        assert!(trie.num_paths() <= 1000);
        let total: usize = trie.paths().iter().map(|(_, items)| items.len()).sum();
        assert_eq!(total, 1000);
        assert_eq!(trie.paths().len(), trie.num_paths());
    }

    struct Certain(Vec<u32>, Vec<usize>);

    impl StepModel for Certain {
        fn num_steps(&self) -> usize {
            self.0.len()
        }

        fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let t = prefix.len();
            Ok((0..self.1[t] as u32)
                .map(|tok| if tok == self.0[t] { 0.0 } else { f64::NEG_INFINITY })
                .collect())
        }
    }

    #[test]
    fn deterministic_chain_yields_one_candidate() {
        let trie = build_trie(&full_grid(&[3, 3, 3])).unwrap();
        let model = Certain(vec![2, 0, 1], vec![3, 3, 3]);
        let out = beam_search(&model, &trie, 5, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].path, vec![2, 0, 1]);
        assert_eq!(out[0].logprob, 0.0);
    }

    #[test]
    fn full_width_matches_exhaustive_ranking() {
        let trie = build_trie(&full_grid(&[3, 3, 3])).unwrap();
        for seed in 0..5 {
            let model = RandomModel {
                vocab: vec![3, 3, 3],
                seed,
                sharpness: 3.0,
            };
            let oracle = exhaustive(&model, &trie);
            let got = beam_search(&model, &trie, 27, 27).unwrap();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn beam_respects_the_trie() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<_> = (0..40)
            .map(|i| seq(i, &[rng.random_range(0..5), rng.random_range(0..5), rng.random_range(0..5)]))
            .collect();
        let trie = build_trie(&seqs).unwrap();
        let model = RandomModel {
            vocab: vec![5, 5, 5],
            seed: 9,
            sharpness: 4.0,
        };
        let out = beam_search(&model, &trie, 8, 8).unwrap();
        assert_eq!(out.len(), 8);
        for w in out.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_ne!(w[0].path, w[1].path);
        }
        assert!(out.iter().all(|c| trie.contains(&c.path) && c.item_ids == trie.items(&c.path)));
    }

    #[test]
    fn beam_argument_errors() {
        let trie = build_trie(&full_grid(&[2, 2])).unwrap();
        let model = RandomModel {
            vocab: vec![2, 2],
            seed: 0,
            sharpness: 1.0,
        };
        assert!(beam_search(&model, &trie, 1, 2).is_err());
        assert!(beam_search(&model, &trie, 2, 0).is_err());
        assert!(beam_search(&model, &build_trie(&[]).unwrap(), 2, 1).is_err());
        assert_eq!(beam_search(&model, &trie, 10, 10).unwrap().len(), 4);
    }

    fn five_step_instance(seed: u64) -> (PathTrie, RandomModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<_> = (0..60)
            .map(|i| seq(i, &(0..5).map(|_| rng.random_range(0..4)).collect::<Vec<u32>>()))
            .collect();
        let model = RandomModel {
            vocab: vec![4; 5],
            seed,
            sharpness: 6.0,
        };
        (build_trie(&seqs).unwrap(), model)
    }

    #[test]
    fn wider_beams_can_lose_the_greedy_path() {
        let (trie, model) = five_step_instance(178);
        let b1 = beam_search(&model, &trie, 1, 1).unwrap()[0].logprob;
        let b2 = beam_search(&model, &trie, 2, 1).unwrap()[0].logprob;
        assert!(b2 < b1, "{b2} vs {b1}");
    }

    #[test]
    fn top1_is_bounded_by_the_exhaustive_optimum() {
        for seed in 170..190 {
            let (trie, model) = five_step_instance(seed);
            let best = exhaustive(&model, &trie)[0].logprob;
            for width in 1..=trie.num_paths() {
                assert!(beam_search(&model, &trie, width, 1).unwrap()[0].logprob <= best);
            }
            assert_eq!(beam_search(&model, &trie, trie.num_paths(), 1).unwrap()[0].logprob, best);
        }
    }
}
