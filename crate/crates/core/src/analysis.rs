//! Exposure concentration, conditional entropy of SID layers, cascading decode
//! error and the discriminative/generative rank-equivalence check.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::SemanticId;

/// Exposure mass of each distinct `depth`-prefix, sorted heaviest first and
/// normalized to shares.
pub fn group_shares(sids: &[SemanticId], weights: &[f64], depth: usize) -> Result<Vec<f64>> {
    if sids.is_empty() {
        return Err(Error::InvalidInput("exposure analysis needs at least one item".into()));
    }
    if sids.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} semantic ids but {} weights",
            sids.len(),
            weights.len()
        )));
    }
    let max_depth = sids.iter().map(|s| s.codes.len()).min().unwrap_or(0);
    if depth == 0 || depth > max_depth {
        return Err(Error::InvalidInput(format!(
            "depth must lie in 1..={max_depth}, got {depth}"
        )));
    }
    let mut groups: BTreeMap<&[u32], f64> = BTreeMap::new();
    for (sid, &w) in sids.iter().zip(weights) {
        *groups.entry(&sid.codes[..depth]).or_insert(0.0) += w;
    }
    let total: f64 = groups.values().sum();
    let mut shares: Vec<f64> = groups.into_values().map(|w| w / total).collect();
    shares.sort_by(|a, b| b.total_cmp(a));
    Ok(shares)
}

/// Number of groups in the top `top_frac` fraction (rounded up).
fn top_count(n_groups: usize, top_frac: f64) -> usize {
    // the small slack keeps e.g. 0.1 * 100 from rounding up to 11
    (((top_frac * n_groups as f64) - 1e-9).ceil() as usize).clamp(1, n_groups)
}

fn top_share(shares: &[f64], top_frac: f64) -> f64 {
    shares[..top_count(shares.len(), top_frac)].iter().sum()
}

/// Exposure share captured by the heaviest `ceil(top_frac * #groups)`
/// prefix groups at the given depth.
pub fn exposure_concentration(
    sids: &[SemanticId],
    weights: &[f64],
    depth: usize,
    top_frac: f64,
) -> Result<f64> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::InvalidInput(format!("top_frac must lie in (0, 1], got {top_frac}")));
    }
    Ok(top_share(&group_shares(sids, weights, depth)?, top_frac))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConcentration {
    pub depth: usize,
    pub n_groups: usize,
    pub top_1pct: f64,
    pub top_5pct: f64,
    pub top_10pct: f64,
    /// Group shares, heaviest first.
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub levels: Vec<LevelConcentration>,
}

pub fn exposure_report(sids: &[SemanticId], weights: &[f64]) -> Result<ExposureReport> {
    let depth = sids.iter().map(|s| s.codes.len()).min().unwrap_or(0);
    let levels = (1..=depth)
        .map(|d| {
            let shares = group_shares(sids, weights, d)?;
            Ok(LevelConcentration {
                depth: d,
                n_groups: shares.len(),
                top_1pct: top_share(&shares, 0.01),
                top_5pct: top_share(&shares, 0.05),
                top_10pct: top_share(&shares, 0.10),
                shares,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExposureReport { levels })
}

/// One item's attribute tokens and SID codes with its exposure weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPath {
    pub attrs: Vec<u32>,
    pub sid: Vec<u32>,
    pub weight: f64,
}

/// What a conditional entropy conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    pub attributes: bool,
    /// Number of leading SID codes in the condition.
    pub sid_prefix: usize,
}

/// Plug-in estimate of `H(target | condition)` in bits over exposure-weighted
/// empirical frequencies.
pub fn conditional_entropy(paths: &[WeightedPath], target_layer: usize, cond: Condition) -> Result<f64> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("entropy of an empty sample".into()));
    }
    if cond.sid_prefix > target_layer {
        return Err(Error::InvalidInput(format!(
            "condition prefix {} must precede target layer {target_layer}",
            cond.sid_prefix
        )));
    }
    let mut joint: BTreeMap<(Vec<u32>, u32), f64> = BTreeMap::new();
    let mut marginal: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    let mut total = 0.0;
    for p in paths {
        let target = *p.sid.get(target_layer).ok_or_else(|| {
            Error::InvalidInput(format!("path has no SID layer {target_layer}"))
        })?;
        let mut key = Vec::with_capacity(p.attrs.len() + cond.sid_prefix);
        if cond.attributes {
            key.extend_from_slice(&p.attrs);
        }
        key.extend_from_slice(&p.sid[..cond.sid_prefix]);
        *marginal.entry(key.clone()).or_insert(0.0) += p.weight;
        *joint.entry((key, target)).or_insert(0.0) += p.weight;
        total += p.weight;
    }
    let h: f64 = joint
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|((key, _), &w)| {
            let p_joint = w / total;
            let p_cond = w / marginal[key];
            -p_joint * p_cond.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub layer: usize,
    pub h_without_attrs: f64,
    pub h_with_attrs: f64,
    pub delta: f64,
}

/// `H(s_l | s_<l) - H(s_l | a, s_<l)`, the plug-in conditional mutual
/// information between attributes and layer `l`.
pub fn entropy_reduction(paths: &[WeightedPath], layer: usize) -> Result<LayerEntropy> {
    let without = conditional_entropy(
        paths,
        layer,
        Condition {
            attributes: false,
            sid_prefix: layer,
        },
    )?;
    let with = conditional_entropy(
        paths,
        layer,
        Condition {
            attributes: true,
            sid_prefix: layer,
        },
    )?;
    Ok(LayerEntropy {
        layer,
        h_without_attrs: without,
        h_with_attrs: with,
        delta: without - with,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub layers: Vec<LayerEntropy>,
}

pub fn entropy_report(paths: &[WeightedPath]) -> Result<EntropyReport> {
    let depth = paths.iter().map(|p| p.sid.len()).min().unwrap_or(0);
    let layers = (0..depth)
        .map(|l| entropy_reduction(paths, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyReport { layers })
}

/// Probability that at least one layer is decoded wrongly, given independent
/// per-layer error rates.
pub fn cascading_error(rates: &[f64]) -> Result<f64> {
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidInput(format!("error rate {r} outside [0, 1]")));
    }
    Ok(1.0 - rates.iter().map(|e| 1.0 - e).product::<f64>())
}

/// A finite joint over users, candidate feature vectors and a binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    /// Domain size of each feature.
    pub domains: Vec<u32>,
    /// `p(u)`.
    pub user_prior: Vec<f64>,
    /// Feature vectors in the support.
    pub candidates: Vec<Vec<u32>>,
    /// `p(f | u)`, indexed `[u][candidate]`.
    pub feature_prior: Vec<Vec<f64>>,
    /// `p(y = 1 | f, u)`, indexed `[u][candidate]`.
    pub positive_rate: Vec<Vec<f64>>,
}

const PROB_TOL: f64 = 1e-9;

impl DiscreteJoint {
    pub fn validate(&self) -> Result<()> {
        let n_users = self.user_prior.len();
        let n_cand = self.candidates.len();
        if n_users == 0 || n_cand == 0 {
            return Err(Error::InvalidInput("joint needs users and candidates".into()));
        }
        if (self.user_prior.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidInput("p(u) does not sum to 1".into()));
        }
        for f in &self.candidates {
            if f.len() != self.domains.len() || f.iter().zip(&self.domains).any(|(v, d)| v >= d) {
                return Err(Error::InvalidInput(format!("candidate {f:?} outside the feature domains")));
            }
        }
        if self.feature_prior.len() != n_users || self.positive_rate.len() != n_users {
            return Err(Error::Dimension("per-user tables do not match p(u)".into()));
        }
        for u in 0..n_users {
            let prior = &self.feature_prior[u];
            let rate = &self.positive_rate[u];
            if prior.len() != n_cand || rate.len() != n_cand {
                return Err(Error::Dimension(format!("user {u} tables do not match the support")));
            }
            if (prior.iter().sum::<f64>() - 1.0).abs() > PROB_TOL || prior.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidInput(format!("p(f | u={u}) is not a distribution")));
            }
            if rate.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidInput(format!("p(y | f, u={u}) outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Random joint whose candidate prior is uniform over a random support of
    /// at most `max_support` feature vectors.
    pub fn random(seed: u64, max_support: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_features = rng.random_range(1..=3usize);
        let mut domains: Vec<u32> = (0..n_features).map(|_| rng.random_range(2..=4)).collect();
        while domains.iter().product::<u32>() as usize > max_support.max(2) {
            let i = domains.iter().enumerate().max_by_key(|(_, d)| **d).map(|(i, _)| i).unwrap();
            domains[i] -= 1;
        }
        let mut all: Vec<Vec<u32>> = vec![vec![]];
        for &d in &domains {
            all = all
                .into_iter()
                .flat_map(|p| {
                    (0..d).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        let mut candidates: Vec<Vec<u32>> = all.into_iter().filter(|_| rng.random::<f64>() < 0.8).collect();
        if candidates.is_empty() {
            candidates.push(vec![0; domains.len()]);
        }
        let n_users = rng.random_range(1..=3usize);
        let raw: Vec<f64> = (0..n_users).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let user_prior = raw.into_iter().map(|p| p / z).collect();
        let n = candidates.len();
        let feature_prior = vec![vec![1.0 / n as f64; n]; n_users];
        let positive_rate = (0..n_users)
            .map(|_| (0..n).map(|_| rng.random_range(0.01..0.99)).collect())
            .collect();
        Self {
            domains,
            user_prior,
            candidates,
            feature_prior,
            positive_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRankResult {
    /// Candidate indices ranked by `p(y=1 | f, u)`.
    pub order_disc: Vec<usize>,
    /// Candidate indices ranked by `p(f | y=1, u) p(y=1 | u)`.
    pub order_gen: Vec<usize>,
    pub disc_scores: Vec<f64>,
    pub gen_scores: Vec<f64>,
    /// Largest gap between the direct `p(f | y=1, u)` and its chain-rule product.
    pub chain_rule_max_dev: f64,
    pub equal_up_to_ties: bool,
}

fn distinct(a: f64, b: f64) -> bool {
    (a - b).abs() > 1e-12 * a.abs().max(b.abs())
}

fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Ranks candidates discriminatively and generatively (Bayes inversion of the
/// joint, re-expanded feature by feature with the chain rule) and checks that
/// the two orders agree wherever scores differ.
///
/// The orders coincide when `p(f | u)` is constant over the candidates; with a
/// non-uniform candidate prior the flag reports the disagreement.
pub fn bayes_rank_check(joint: &DiscreteJoint, user: usize) -> Result<BayesRankResult> {
    joint.validate()?;
    if user >= joint.user_prior.len() {
        return Err(Error::InvalidInput(format!("unknown user {user}")));
    }
    let prior = &joint.feature_prior[user];
    let rate = &joint.positive_rate[user];
    let n = joint.candidates.len();

    let joint_pos: Vec<f64> = (0..n).map(|i| prior[i] * rate[i]).collect();
    let p_pos: f64 = joint_pos.iter().sum();
    if p_pos <= 0.0 {
        return Err(Error::Undefined(format!("p(y=1 | u={user}) is zero")));
    }
    let posterior: Vec<f64> = joint_pos.iter().map(|p| p / p_pos).collect();

    // prefix mass of p(f | y=1, u) over the support
    let prefix_mass = |prefix: &[u32]| -> f64 {
        joint
            .candidates
            .iter()
            .zip(&posterior)
            .filter(|(f, _)| f.starts_with(prefix))
            .map(|(_, p)| p)
            .sum()
    };
    let mut chain_rule_max_dev = 0.0f64;
    let mut gen_scores = Vec::with_capacity(n);
    for (i, f) in joint.candidates.iter().enumerate() {
        let mut product = 1.0;
        for k in 0..f.len() {
            let denom = prefix_mass(&f[..k]);
            let numer = prefix_mass(&f[..=k]);
            product *= if denom > 0.0 { numer / denom } else { 0.0 };
        }
        chain_rule_max_dev = chain_rule_max_dev.max((product - posterior[i]).abs());
        gen_scores.push(product * p_pos);
    }
    let disc_scores = rate.clone();
    let mut agree = true;
    for a in 0..n {
        for b in 0..n {
            let d_ab = disc_scores[a] > disc_scores[b] && distinct(disc_scores[a], disc_scores[b]);
            let g_ba = gen_scores[b] > gen_scores[a] && distinct(gen_scores[a], gen_scores[b]);
            if d_ab && g_ba {
                agree = false;
            }
        }
    }
    Ok(BayesRankResult {
        order_disc: rank_desc(&disc_scores),
        order_gen: rank_desc(&gen_scores),
        disc_scores,
        gen_scores,
        chain_rule_max_dev,
        equal_up_to_ties: agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(codes: &[u32]) -> SemanticId {
        SemanticId {
            item_id: 0,
            codes: codes.to_vec(),
        }
    }

    #[test]
    fn uniform_weights_give_fractional_share() {
        let sids: Vec<_> = (0..100).map(|i| sid(&[i])).collect();
        let share = exposure_concentration(&sids, &[1.0; 100], 1, 0.1).unwrap();
        assert!((share - 0.10).abs() < 1e-12);
    }

    #[test]
    fn hand_summed_share() {
        let sids = vec![sid(&[0]), sid(&[1]), sid(&[2])];
        let share = exposure_concentration(&sids, &[8.0, 1.0, 1.0], 1, 1.0 / 3.0).unwrap();
        assert!((share - 0.8).abs() < 1e-12);
    }

    #[test]
    fn concentration_errors() {
        assert!(exposure_concentration(&[], &[], 1, 0.1).is_err());
        assert!(exposure_concentration(&[sid(&[0])], &[1.0], 2, 0.1).is_err());
        assert!(exposure_concentration(&[sid(&[0])], &[1.0], 1, 0.0).is_err());
    }

    #[test]
    fn cascading_error_values() {
        assert_eq!(cascading_error(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((cascading_error(&[0.1, 0.1]).unwrap() - 0.19).abs() < 1e-15);
        assert!(cascading_error(&[1.2]).is_err());
    }

    fn path(attrs: &[u32], sid: &[u32], weight: f64) -> WeightedPath {
        WeightedPath {
            attrs: attrs.to_vec(),
            sid: sid.to_vec(),
            weight,
        }
    }

    #[test]
    fn deterministic_target_has_zero_entropy() {
        let paths: Vec<_> = (0..8).map(|i| path(&[i], &[i * 2], 1.0)).collect();
        let h = conditional_entropy(&paths, 0, Condition { attributes: true, sid_prefix: 0 }).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn uniform_target_independent_condition() {
        let paths: Vec<_> = (0..4)
            .flat_map(|t| (0..2).map(move |a| path(&[a], &[t], 1.0)))
            .collect();
        let h = conditional_entropy(&paths, 0, Condition { attributes: true, sid_prefix: 0 }).unwrap();
        assert!((h - 2.0).abs() < 1e-12);
        let r = entropy_reduction(&paths, 0).unwrap();
        assert!(r.delta.abs() < 1e-12);
    }

    #[test]
    fn attributes_determining_uniform_layer_give_three_bits() {
        let paths: Vec<_> = (0..8).map(|i| path(&[i], &[i], 1.0)).collect();
        let r = entropy_reduction(&paths, 0).unwrap();
        assert!((r.delta - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_table_matches_naive_double_loop() {
        let paths = vec![
            path(&[0], &[0, 1], 3.0),
            path(&[0], &[1, 1], 1.0),
            path(&[1], &[1, 0], 2.0),
            path(&[1], &[1, 1], 2.0),
            path(&[0], &[0, 0], 1.0),
            path(&[1], &[0, 1], 5.0),
        ];
        // naive: for each condition value c and target t, loop over all paths
        let naive = |use_attr: bool, prefix: usize, target: usize| {
            let total: f64 = paths.iter().map(|p| p.weight).sum();
            let key = |p: &WeightedPath| {
                let mut k = if use_attr { p.attrs.clone() } else { vec![] };
                k.extend_from_slice(&p.sid[..prefix]);
                k
            };
            let mut h = 0.0;
            let mut seen = Vec::new();
            for p in &paths {
                let pair = (key(p), p.sid[target]);
                if seen.contains(&pair) {
                    continue;
                }
                seen.push(pair.clone());
                let joint: f64 = paths
                    .iter()
                    .filter(|q| key(q) == pair.0 && q.sid[target] == pair.1)
                    .map(|q| q.weight)
                    .sum();
                let marg: f64 = paths.iter().filter(|q| key(q) == pair.0).map(|q| q.weight).sum();
                h -= joint / total * (joint / marg).log2();
            }
            h
        };
        for (attr, prefix, target) in [(false, 0, 0), (true, 0, 0), (false, 1, 1), (true, 1, 1), (true, 0, 1)] {
            let got = conditional_entropy(&paths, target, Condition { attributes: attr, sid_prefix: prefix }).unwrap();
            assert!((got - naive(attr, prefix, target)).abs() < 1e-12, "{attr} {prefix} {target}");
        }
    }

    #[test]
    fn bayes_dominance_and_ties() {
        let joint = DiscreteJoint {
            domains: vec![2],
            user_prior: vec![1.0],
            candidates: vec![vec![0], vec![1]],
            feature_prior: vec![vec![0.5, 0.5]],
            positive_rate: vec![vec![0.9, 0.1]],
        };
        let r = bayes_rank_check(&joint, 0).unwrap();
        assert_eq!(r.order_disc, vec![0, 1]);
        assert_eq!(r.order_gen, vec![0, 1]);
        assert!(r.equal_up_to_ties);

        let tied = DiscreteJoint {
            positive_rate: vec![vec![0.4, 0.4]],
            ..joint.clone()
        };
        assert!(bayes_rank_check(&tied, 0).unwrap().equal_up_to_ties);
    }

    #[test]
    fn bayes_zero_normalizer_is_an_error() {
        let joint = DiscreteJoint {
            domains: vec![2],
            user_prior: vec![1.0],
            candidates: vec![vec![0], vec![1]],
            feature_prior: vec![vec![0.5, 0.5]],
            positive_rate: vec![vec![0.0, 0.0]],
        };
        assert!(matches!(bayes_rank_check(&joint, 0), Err(Error::Undefined(_))));
    }

    #[test]
    fn skewed_candidate_prior_breaks_the_equivalence() {
        let joint = DiscreteJoint {
            domains: vec![2],
            user_prior: vec![1.0],
            candidates: vec![vec![0], vec![1]],
            feature_prior: vec![vec![0.05, 0.95]],
            positive_rate: vec![vec![0.9, 0.5]],
        };
        assert!(!bayes_rank_check(&joint, 0).unwrap().equal_up_to_ties);
    }

    #[test]
    fn random_joints_are_valid() {
        for seed in 0..20 {
            let j = DiscreteJoint::random(seed, 64);
            j.validate().unwrap();
            assert!(j.candidates.len() <= 64);
        }
    }
}
