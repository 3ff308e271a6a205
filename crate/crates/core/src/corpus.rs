//! Item and interaction data model, synthetic long-tail generators and
//! JSON-lines persistence.
//!
//! Items are drawn from Gaussian blobs. Each blob owns one fine-grained (`l3`)
//! category; with probability `attr_correlation` an item carries its blob's
//! category, otherwise a uniformly random one. `l3` determines `l2`, which
//! determines `l1`. Exposure weights are i.i.d. Zipf draws over
//! `1..=n_items`, so every item has at least one impression.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_OBJECTIVES: [&str; 4] = ["click", "purchase", "cart", "cross-border"];
pub const DEFAULT_SCENES: [&str; 4] = ["main-feed", "search", "similar-items", "flash-sale"];

const CENTER_SCALE: f64 = 3.0;
const BLOB_SPREAD: f64 = 1.0;
const SELLERS_PER_BLOB: u32 = 2;
const BRANDS_PER_BLOB: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrField {
    L1,
    L2,
    L3,
    Seller,
    Brand,
}

impl AttrField {
    pub const ALL: [AttrField; 5] = [
        AttrField::L1,
        AttrField::L2,
        AttrField::L3,
        AttrField::Seller,
        AttrField::Brand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttrField::L1 => "l1",
            AttrField::L2 => "l2",
            AttrField::L3 => "l3",
            AttrField::Seller => "seller",
            AttrField::Brand => "brand",
        }
    }
}

impl std::str::FromStr for AttrField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttrField::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown {
                kind: "attribute field",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    pub l1: u32,
    pub l2: u32,
    pub l3: u32,
    pub seller: u32,
    pub brand: u32,
}

impl Attrs {
    pub fn get(&self, field: AttrField) -> u32 {
        match field {
            AttrField::L1 => self.l1,
            AttrField::L2 => self.l2,
            AttrField::L3 => self.l3,
            AttrField::Seller => self.seller,
            AttrField::Brand => self.brand,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: u64,
    pub embedding: Vec<f64>,
    /// Impression count; always positive.
    pub exposure_weight: f64,
    pub attrs: Attrs,
    pub gmv: f64,
}

/// Per-field identifier → index tables. Indices follow ascending identifier order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttrVocab {
    tables: BTreeMap<AttrField, Vec<u32>>,
}

impl AttrVocab {
    pub fn from_items(items: &[Item]) -> Self {
        let tables = AttrField::ALL
            .into_iter()
            .map(|field| {
                let mut ids: Vec<u32> = items.iter().map(|it| it.attrs.get(field)).collect();
                ids.sort_unstable();
                ids.dedup();
                (field, ids)
            })
            .collect();
        Self { tables }
    }

    pub fn size(&self, field: AttrField) -> usize {
        self.tables.get(&field).map_or(0, Vec::len)
    }

    pub fn index(&self, field: AttrField, id: u32) -> Option<usize> {
        self.tables.get(&field)?.binary_search(&id).ok()
    }

    pub fn id(&self, field: AttrField, index: usize) -> Option<u32> {
        self.tables.get(&field)?.get(index).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCorpus {
    items: Vec<Item>,
    d_emb: usize,
    vocab: AttrVocab,
}

impl ItemCorpus {
    /// Validates the items and builds the attribute vocabularies.
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let d_emb = items.first().map_or(0, |it| it.embedding.len());
        let mut seen = HashSet::with_capacity(items.len());
        let mut l3_parent: HashMap<u32, u32> = HashMap::new();
        let mut l2_parent: HashMap<u32, u32> = HashMap::new();
        for item in &items {
            if !seen.insert(item.item_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate item_id {}",
                    item.item_id
                )));
            }
            if item.embedding.len() != d_emb {
                return Err(Error::Dimension(format!(
                    "item {} has embedding of length {}, expected {d_emb}",
                    item.item_id,
                    item.embedding.len()
                )));
            }
            if !item.embedding.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of item {}", item.item_id)));
            }
            if !(item.exposure_weight > 0.0 && item.exposure_weight.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "item {} has non-positive exposure weight {}",
                    item.item_id, item.exposure_weight
                )));
            }
            if !(item.gmv >= 0.0 && item.gmv.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "item {} has invalid gmv {}",
                    item.item_id, item.gmv
                )));
            }
            for (child, parent, table, level) in [
                (item.attrs.l3, item.attrs.l2, &mut l3_parent, "l3"),
                (item.attrs.l2, item.attrs.l1, &mut l2_parent, "l2"),
            ] {
                if *table.entry(child).or_insert(parent) != parent {
                    return Err(Error::InvalidInput(format!(
                        "{level} category {child} has more than one parent"
                    )));
                }
            }
        }
        let vocab = AttrVocab::from_items(&items);
        Ok(Self {
            items,
            d_emb,
            vocab,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn vocab(&self) -> &AttrVocab {
        &self.vocab
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.exposure_weight).collect()
    }

    pub fn position_of(&self) -> HashMap<u64, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id, i))
            .collect()
    }

    pub fn mean_gmv(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|it| it.gmv).sum::<f64>() / self.items.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl(path, &self.items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(jsonl::read_jsonl(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub item_id: u64,
    /// 0 = exposed only, 1 = clicked, 2 = purchased.
    pub level: u8,
    pub exposure_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub request_id: String,
    pub user_id: String,
    pub scene: String,
    pub objective: String,
    pub events: Vec<Event>,
    pub reward_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub requests: Vec<Interaction>,
}

impl InteractionLog {
    /// Checks exposure-rank uniqueness per request and item existence.
    pub fn validate(&self, corpus: &ItemCorpus) -> Result<()> {
        let known: HashSet<u64> = corpus.items().iter().map(|it| it.item_id).collect();
        for req in &self.requests {
            let mut ranks = HashSet::new();
            for ev in &req.events {
                if !ranks.insert(ev.exposure_rank) {
                    return Err(Error::InvalidInput(format!(
                        "request {} repeats exposure rank {}",
                        req.request_id, ev.exposure_rank
                    )));
                }
                if !known.contains(&ev.item_id) {
                    return Err(Error::Unknown {
                        kind: "item_id",
                        value: ev.item_id.to_string(),
                    });
                }
                if ev.level > 2 {
                    return Err(Error::InvalidInput(format!(
                        "request {} has event level {}",
                        req.request_id, ev.level
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl(path, &self.requests)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            requests: jsonl::read_jsonl(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub d_emb: usize,
    pub n_clusters_true: usize,
    pub zipf_exponent: f64,
    pub attr_correlation: f64,
    pub n_requests: usize,
    pub events_per_request: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Number of distinct users; 0 means `max(1, n_requests / 4)`.
    pub n_users: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            d_emb: 16,
            n_clusters_true: 16,
            zipf_exponent: 1.1,
            attr_correlation: 0.9,
            n_requests: 4000,
            events_per_request: 5,
            seed: 7,
            n_users: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("d_emb", self.d_emb),
            ("n_clusters_true", self.n_clusters_true),
            ("n_requests", self.n_requests),
            ("events_per_request", self.events_per_request),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config("zipf_exponent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attr_correlation) {
            return Err(Error::Config("attr_correlation must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn users(&self) -> usize {
        if self.n_users > 0 {
            self.n_users
        } else {
            (self.n_requests / 4).max(1)
        }
    }
}

/// Parent of an `l3` category in the fixed taxonomy.
pub fn l2_of(l3: u32) -> u32 {
    l3 / 2
}

pub fn l1_of(l2: u32) -> u32 {
    l2 / 2
}

/// Blob index each generated item was drawn from, recomputed from the same seed.
pub fn generate_corpus_with_blobs(cfg: &SynthConfig) -> Result<(ItemCorpus, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_blobs = cfg.n_clusters_true;
    let center_dist = Normal::new(0.0, CENTER_SCALE).expect("valid normal");
    let noise = Normal::new(0.0, BLOB_SPREAD).expect("valid normal");
    let centers: Vec<Vec<f64>> = (0..n_blobs)
        .map(|_| (0..cfg.d_emb).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let zipf = Zipf::new(cfg.n_items as f64, cfg.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf: {e}")))?;
    let gmv_dist = LogNormal::new(3.0, 1.0).expect("valid lognormal");
    let n_l3 = n_blobs as u32;
    let n_sellers = n_blobs as u32 * SELLERS_PER_BLOB;
    let n_brands = n_blobs as u32 * BRANDS_PER_BLOB;

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut blobs = Vec::with_capacity(cfg.n_items);
    for item_id in 0..cfg.n_items {
        let blob = rng.random_range(0..n_blobs);
        let embedding = centers[blob]
            .iter()
            .map(|c| c + noise.sample(&mut rng))
            .collect();
        let b = blob as u32;
        let l3 = if rng.random::<f64>() < cfg.attr_correlation {
            b
        } else {
            rng.random_range(0..n_l3)
        };
        let seller = if rng.random::<f64>() < cfg.attr_correlation {
            b * SELLERS_PER_BLOB + rng.random_range(0..SELLERS_PER_BLOB)
        } else {
            rng.random_range(0..n_sellers)
        };
        let brand = if rng.random::<f64>() < cfg.attr_correlation {
            b * BRANDS_PER_BLOB + rng.random_range(0..BRANDS_PER_BLOB)
        } else {
            rng.random_range(0..n_brands)
        };
        let exposure_weight = zipf.sample(&mut rng).ceil().max(1.0);
        let gmv: f64 = (gmv_dist.sample(&mut rng) * 100.0_f64).round() / 100.0;
        let l2 = l2_of(l3);
        items.push(Item {
            item_id: item_id as u64,
            embedding,
            exposure_weight,
            attrs: Attrs {
                l1: l1_of(l2),
                l2,
                l3,
                seller,
                brand,
            },
            gmv,
        });
        blobs.push(blob);
    }
    Ok((ItemCorpus::new(items)?, blobs))
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<ItemCorpus> {
    generate_corpus_with_blobs(cfg).map(|(corpus, _)| corpus)
}

/// Request-grouped exposure logs. Items are drawn proportionally to exposure
/// weight; users click and buy more within their preferred `l2` category.
pub fn generate_interactions(corpus: &ItemCorpus, cfg: &SynthConfig) -> Result<InteractionLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot draw interactions from an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f0d_a7a5_eed5_0001);
    let items = corpus.items();
    let sampler = WeightedIndex::new(items.iter().map(|it| it.exposure_weight))
        .map_err(|e| Error::InvalidInput(format!("exposure weights: {e}")))?;
    let mut l2_values: Vec<u32> = items.iter().map(|it| it.attrs.l2).collect();
    l2_values.sort_unstable();
    l2_values.dedup();
    let n_users = cfg.users();
    let preferred: Vec<u32> = (0..n_users)
        .map(|_| l2_values[rng.random_range(0..l2_values.len())])
        .collect();
    let distinct = cfg.events_per_request <= items.len();

    let mut requests = Vec::with_capacity(cfg.n_requests);
    for r in 0..cfg.n_requests {
        let user = rng.random_range(0..n_users);
        let objective = DEFAULT_OBJECTIVES[rng.random_range(0..DEFAULT_OBJECTIVES.len())];
        let scene = DEFAULT_SCENES[rng.random_range(0..DEFAULT_SCENES.len())];
        let buy_boost = if objective == "purchase" { 1.5 } else { 1.0 };

        let mut chosen: Vec<usize> = Vec::with_capacity(cfg.events_per_request);
        while chosen.len() < cfg.events_per_request {
            let idx = sampler.sample(&mut rng);
            if distinct && chosen.contains(&idx) {
                continue;
            }
            chosen.push(idx);
        }

        let mut events = Vec::with_capacity(chosen.len());
        let mut gmv = 0.0;
        let mut watch_time = 0.0;
        for (rank, &idx) in chosen.iter().enumerate() {
            let item = &items[idx];
            let liked = item.attrs.l2 == preferred[user];
            let p_click = if liked { 0.6 } else { 0.15 };
            let p_buy: f64 = (if liked { 0.35_f64 } else { 0.1 } * buy_boost).min(1.0);
            let mut level = 0u8;
            if rng.random::<f64>() < p_click {
                level = 1;
                watch_time += rng.random_range(5.0..60.0);
                if rng.random::<f64>() < p_buy {
                    level = 2;
                    gmv += item.gmv;
                }
            }
            events.push(Event {
                item_id: item.item_id,
                level,
                exposure_rank: rank as u32 + 1,
            });
        }
        let reward_metrics = BTreeMap::from([
            ("gmv".to_string(), gmv),
            ("watch_time".to_string(), watch_time),
        ]);
        requests.push(Interaction {
            request_id: format!("r{r:08}"),
            user_id: format!("u{user:06}"),
            scene: scene.to_string(),
            objective: objective.to_string(),
            events,
            reward_metrics,
        });
    }
    Ok(InteractionLog { requests })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_items: usize) -> SynthConfig {
        SynthConfig {
            n_items,
            d_emb: 4,
            n_clusters_true: 8,
            n_requests: 50,
            events_per_request: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_item_corpus() {
        let corpus = generate_corpus(&small(1)).unwrap();
        assert_eq!(corpus.len(), 1);
        assert!(corpus.items()[0].exposure_weight >= 1.0);
        let log = generate_interactions(&corpus, &small(1)).unwrap();
        assert!(log
            .requests
            .iter()
            .flat_map(|r| &r.events)
            .all(|e| e.item_id == corpus.items()[0].item_id));
    }

    #[test]
    fn full_correlation_maps_each_blob_to_one_category() {
        let cfg = SynthConfig {
            attr_correlation: 1.0,
            ..small(2000)
        };
        let (corpus, blobs) = generate_corpus_with_blobs(&cfg).unwrap();
        let mut map: HashMap<usize, HashSet<u32>> = HashMap::new();
        for (item, blob) in corpus.items().iter().zip(&blobs) {
            map.entry(*blob).or_default().insert(item.attrs.l3);
        }
        assert_eq!(map.len(), 8);
        assert!(map.values().all(|s| s.len() == 1));
        let images: HashSet<u32> = map.values().flatten().copied().collect();
        assert_eq!(images.len(), 8);
    }

    #[test]
    fn one_event_per_request() {
        let cfg = SynthConfig {
            events_per_request: 1,
            ..small(100)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let log = generate_interactions(&corpus, &cfg).unwrap();
        assert!(log.requests.iter().all(|r| r.events.len() == 1));
        log.validate(&corpus).unwrap();
    }

    #[test]
    fn taxonomy_violation_rejected() {
        let mut corpus = generate_corpus(&small(10)).unwrap().items().to_vec();
        corpus[1].attrs.l3 = corpus[0].attrs.l3;
        corpus[1].attrs.l2 = corpus[0].attrs.l2 + 1;
        assert!(ItemCorpus::new(corpus).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            attr_correlation: 1.5,
            ..small(10)
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            n_items: 0,
            ..small(10)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn vocab_indices_follow_sorted_ids() {
        let corpus = generate_corpus(&small(300)).unwrap();
        let vocab = corpus.vocab();
        for item in corpus.items() {
            let idx = vocab.index(AttrField::L3, item.attrs.l3).unwrap();
            assert_eq!(vocab.id(AttrField::L3, idx), Some(item.attrs.l3));
        }
    }
}
