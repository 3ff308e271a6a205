//! Chain-of-Attribute token sequences, task-conditioned BOS tokens and the
//! hashed content summary.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrField, AttrVocab, Item, DEFAULT_OBJECTIVES, DEFAULT_SCENES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quantizer::SemanticId;

/// The registered objectives and scenes; BOS ids enumerate their product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRegistry {
    pub objectives: Vec<String>,
    pub scenes: Vec<String>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self {
            objectives: DEFAULT_OBJECTIVES.iter().map(|s| s.to_string()).collect(),
            scenes: DEFAULT_SCENES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TaskRegistry {
    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() || self.scenes.is_empty() {
            return Err(Error::Config("task registry needs objectives and scenes".into()));
        }
        for list in [&self.objectives, &self.scenes] {
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Config(format!("duplicate entries in task registry {list:?}")));
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.objectives.len() * self.scenes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskContext {
    pub objective: String,
    pub scene: String,
}

impl TaskContext {
    pub fn new(objective: impl Into<String>, scene: impl Into<String>) -> Self {
        Self {
            objective: objective.into(),
            scene: scene.into(),
        }
    }
}

pub fn task_bos_token(registry: &TaskRegistry, ctx: &TaskContext) -> Result<u32> {
    let obj = registry
        .objectives
        .iter()
        .position(|o| *o == ctx.objective)
        .ok_or_else(|| Error::Unknown {
            kind: "objective",
            value: ctx.objective.clone(),
        })?;
    let scene = registry
        .scenes
        .iter()
        .position(|s| *s == ctx.scene)
        .ok_or_else(|| Error::Unknown {
            kind: "scene",
            value: ctx.scene.clone(),
        })?;
    Ok((obj * registry.scenes.len() + scene) as u32)
}

/// Step vocabularies of a sequence family. Decoding step `t` (1-based) emits
/// attribute `t` for `t <= m` and SID layer `t - m - 1` afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub attr_chain: Vec<AttrField>,
    pub num_layers: usize,
    pub step_vocab: Vec<usize>,
    /// Offset of each step's tokens in the global (non-BOS) index space.
    pub step_offset: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(attr_chain: &[AttrField], vocab: &AttrVocab, num_layers: usize, k: usize) -> Result<Self> {
        if num_layers == 0 || k == 0 {
            return Err(Error::InvalidInput("layout needs at least one SID layer and K >= 1".into()));
        }
        let mut seen = attr_chain.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != attr_chain.len() {
            return Err(Error::Config(format!("attribute chain repeats a field: {attr_chain:?}")));
        }
        let mut step_vocab: Vec<usize> = attr_chain.iter().map(|f| vocab.size(*f)).collect();
        if let Some(pos) = step_vocab.iter().position(|v| *v == 0) {
            return Err(Error::InvalidInput(format!(
                "attribute {} has an empty vocabulary",
                attr_chain[pos].name()
            )));
        }
        step_vocab.extend(std::iter::repeat_n(k, num_layers));
        let step_offset = step_vocab
            .iter()
            .scan(0usize, |acc, v| {
                let off = *acc;
                *acc += v;
                Some(off)
            })
            .collect();
        Ok(Self {
            attr_chain: attr_chain.to_vec(),
            num_layers,
            step_vocab,
            step_offset,
        })
    }

    pub fn num_attrs(&self) -> usize {
        self.attr_chain.len()
    }

    pub fn num_steps(&self) -> usize {
        self.step_vocab.len()
    }

    /// Size of the global non-BOS token space.
    pub fn total_tokens(&self) -> usize {
        self.step_vocab.iter().sum()
    }

    /// Vocabulary size of 1-based step `t`.
    pub fn vocab_at(&self, step: usize) -> Result<usize> {
        self.check_step(step)?;
        Ok(self.step_vocab[step - 1])
    }

    pub fn global_index(&self, step: usize, token: u32) -> Result<usize> {
        let v = self.vocab_at(step)?;
        if token as usize >= v {
            return Err(Error::InvalidInput(format!(
                "token {token} outside step {step} vocabulary of size {v}"
            )));
        }
        Ok(self.step_offset[step - 1] + token as usize)
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.num_steps() {
            return Err(Error::InvalidInput(format!(
                "step {step} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Step of attribute field `field`, if it is in the chain.
    pub fn attr_step(&self, field: AttrField) -> Option<usize> {
        self.attr_chain.iter().position(|f| *f == field).map(|p| p + 1)
    }

    /// Step of SID layer `layer`.
    pub fn sid_step(&self, layer: usize) -> Option<usize> {
        (layer < self.num_layers).then_some(self.num_attrs() + 1 + layer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub item_id: u64,
    pub bos: u32,
    /// Attribute tokens as indices into each field's vocabulary.
    pub attrs: Vec<u32>,
    pub sids: Vec<u32>,
}

impl TokenSequence {
    /// Decoded tokens in step order (BOS excluded).
    pub fn steps(&self) -> Vec<u32> {
        self.attrs.iter().chain(&self.sids).copied().collect()
    }

    pub fn len(&self) -> usize {
        1 + self.attrs.len() + self.sids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token emitted at 1-based step `t`.
    pub fn token_at(&self, step: usize) -> u32 {
        let m = self.attrs.len();
        if step <= m {
            self.attrs[step - 1]
        } else {
            self.sids[step - m - 1]
        }
    }
}

pub fn build_sequence(
    layout: &SequenceLayout,
    vocab: &AttrVocab,
    item: &Item,
    sid: &SemanticId,
    bos: u32,
) -> Result<TokenSequence> {
    if sid.item_id != item.item_id {
        return Err(Error::InvalidInput(format!(
            "semantic id for item {} paired with item {}",
            sid.item_id, item.item_id
        )));
    }
    if sid.codes.len() != layout.num_layers {
        return Err(Error::Dimension(format!(
            "item {} has {} SID codes, layout expects {}",
            item.item_id,
            sid.codes.len(),
            layout.num_layers
        )));
    }
    let attrs = layout
        .attr_chain
        .iter()
        .map(|&field| {
            let value = item.attrs.get(field);
            vocab.index(field, value).map(|i| i as u32).ok_or_else(|| Error::Unknown {
                kind: "attribute value",
                value: format!("{}={value} on item {}", field.name(), item.item_id),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = TokenSequence {
        item_id: item.item_id,
        bos,
        attrs,
        sids: sid.codes.clone(),
    };
    for step in 1..=layout.num_steps() {
        layout.global_index(step, seq.token_at(step))?;
    }
    Ok(seq)
}

/// `floor((prod V_i)^(2/(n+1)))`, computed exactly as the integer
/// `(n+1)`-th root of `(prod V_i)^2`.
pub fn hash_table_size(vocab_sizes: &[u64]) -> Result<u64> {
    if vocab_sizes.is_empty() {
        return Err(Error::InvalidInput("hash sizing needs at least one vocabulary".into()));
    }
    if vocab_sizes.contains(&0) {
        return Err(Error::InvalidInput("vocabulary sizes must be >= 1".into()));
    }
    let product: BigUint = vocab_sizes.iter().map(|&v| BigUint::from(v)).product();
    let root = (&product * &product).nth_root(vocab_sizes.len() as u32 + 1);
    u64::try_from(root).map_err(|_| Error::InvalidInput("hash table size overflows u64".into()))
}

/// A Cartesian pair of decoding steps and the table size used for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashPair {
    pub x: usize,
    pub y: usize,
    pub modulus: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashSpec {
    pub pairs: Vec<HashPair>,
    pub num_hashes: usize,
    pub p1: u64,
    pub p2: u64,
    /// Rows of the shared table; the last row is the NULL row.
    pub table_rows: usize,
    pub d_hash: usize,
}

/// Symbolic step reference used to configure pairs independently of `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRef {
    Attr(AttrField),
    Sid(usize),
}

impl std::str::FromStr for StepRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(layer) = s.strip_prefix('s') {
            if let Ok(l) = layer.parse() {
                return Ok(StepRef::Sid(l));
            }
        }
        s.parse().map(StepRef::Attr)
    }
}

pub const DEFAULT_PAIRS: [(&str, &str); 5] = [("l2", "s0"), ("l2", "s1"), ("l3", "s0"), ("l3", "s1"), ("s0", "s1")];

fn is_prime(p: u64) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| p % d != 0)
}

impl HashSpec {
    /// Resolves `pairs` against `layout`, dropping pairs whose steps are not
    /// part of the sequence.
    pub fn new(
        layout: &SequenceLayout,
        pairs: &[(StepRef, StepRef)],
        num_hashes: usize,
        primes: (u64, u64),
        d_hash: usize,
    ) -> Result<Self> {
        if !(1..=3).contains(&num_hashes) {
            return Err(Error::Config(format!("num_hashes must lie in 1..=3, got {num_hashes}")));
        }
        let (p1, p2) = primes;
        if p1 == p2 || !is_prime(p1) || !is_prime(p2) {
            return Err(Error::Config(format!("hash primes must be distinct primes, got {p1}, {p2}")));
        }
        if d_hash == 0 {
            return Err(Error::Config("d_hash must be positive".into()));
        }
        let resolve = |r: StepRef| match r {
            StepRef::Attr(f) => layout.attr_step(f),
            StepRef::Sid(l) => layout.sid_step(l),
        };
        let mut resolved = Vec::new();
        for &(a, b) in pairs {
            let (Some(x), Some(y)) = (resolve(a), resolve(b)) else {
                continue;
            };
            if x == y {
                return Err(Error::Config(format!("hash pair {a:?} x {b:?} pairs a step with itself")));
            }
            let modulus = hash_table_size(&[layout.step_vocab[x - 1] as u64, layout.step_vocab[y - 1] as u64])?;
            resolved.push(HashPair {
                x: x.min(y),
                y: x.max(y),
                modulus: modulus as usize,
            });
        }
        let table_rows = resolved.iter().map(|p| p.modulus).max().unwrap_or(1);
        Ok(Self {
            pairs: resolved,
            num_hashes,
            p1,
            p2,
            table_rows,
            d_hash,
        })
    }

    pub fn default_for(layout: &SequenceLayout, d_hash: usize) -> Result<Self> {
        let pairs = DEFAULT_PAIRS
            .iter()
            .map(|(a, b)| Ok((a.parse()?, b.parse()?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout, &pairs, 3, (31, 37), d_hash)
    }

    pub fn null_row(&self) -> usize {
        self.table_rows - 1
    }

    /// Width of the content summary.
    pub fn summary_dim(&self) -> usize {
        self.num_hashes * self.pairs.len() * self.d_hash
    }

    /// Table rows for one pair of global token indices.
    pub fn hash_rows(&self, x: u64, y: u64, modulus: usize) -> Vec<usize> {
        let m = modulus as u64;
        let all = [
            x.wrapping_add(y),
            x.wrapping_mul(y),
            self.p1.wrapping_mul(x).wrapping_add(self.p2.wrapping_mul(y)),
        ];
        all[..self.num_hashes].iter().map(|h| (h % m) as usize).collect()
    }

    /// Table rows read at 1-based step `step` given the tokens of steps
    /// `1..step` (only the first `step - 1` entries of `prefix` are used).
    pub fn summary_rows(&self, layout: &SequenceLayout, prefix: &[u32], step: usize) -> Result<Vec<usize>> {
        let decoded = step - 1;
        if prefix.len() < decoded {
            return Err(Error::Dimension(format!(
                "step {step} needs {decoded} prefix tokens, got {}",
                prefix.len()
            )));
        }
        let mut rows = Vec::with_capacity(self.num_hashes * self.pairs.len());
        for pair in &self.pairs {
            if pair.y <= decoded {
                let gx = layout.global_index(pair.x, prefix[pair.x - 1])? as u64;
                let gy = layout.global_index(pair.y, prefix[pair.y - 1])? as u64;
                rows.extend(self.hash_rows(gx, gy, pair.modulus));
            } else {
                rows.extend(std::iter::repeat_n(self.null_row(), self.num_hashes));
            }
        }
        Ok(rows)
    }
}

/// Concatenated table rows for every pair and hash at `step`.
pub fn content_summary(
    spec: &HashSpec,
    layout: &SequenceLayout,
    prefix: &[u32],
    step: usize,
    table: &Matrix,
) -> Result<Vec<f64>> {
    if table.rows() != spec.table_rows || table.cols() != spec.d_hash {
        return Err(Error::Dimension(format!(
            "hash table is {}x{}, spec needs {}x{}",
            table.rows(),
            table.cols(),
            spec.table_rows,
            spec.d_hash
        )));
    }
    let rows = spec.summary_rows(layout, prefix, step)?;
    let mut out = Vec::with_capacity(spec.summary_dim());
    for r in rows {
        out.extend_from_slice(table.row(r));
    }
    Ok(out)
}
