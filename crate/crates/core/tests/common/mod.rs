//! Small scorers and samples shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidforge::alignment::DpoExample;
use sidforge::corpus::AttrField;
use sidforge::scorer::{Sample, ScorerConfig, ScorerParams};
use sidforge::tokenizer::{HashPair, HashSpec, SequenceLayout, TokenSequence};

pub fn layout(vocab: &[usize], chain: &[AttrField]) -> SequenceLayout {
    let mut offset = 0;
    let step_offset = vocab
        .iter()
        .map(|v| {
            let o = offset;
            offset += v;
            o
        })
        .collect();
    SequenceLayout {
        attr_chain: chain.to_vec(),
        num_layers: vocab.len() - chain.len(),
        step_vocab: vocab.to_vec(),
        step_offset,
    }
}

pub fn randomize(params: &mut ScorerParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.trainable.tensors_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
}

pub const N_BOS: usize = 3;
pub const N_ITEMS: usize = 6;

pub fn tiny_params(instance: u64) -> ScorerParams {
    let (vocab, chain): (Vec<usize>, Vec<AttrField>) = if instance % 2 == 0 {
        (vec![3, 4, 5], vec![AttrField::L2])
    } else {
        (vec![3, 4, 5, 6], vec![AttrField::L2, AttrField::L3])
    };
    let hash = HashSpec {
        pairs: vec![HashPair { x: 1, y: 2, modulus: 7 }, HashPair { x: 2, y: 3, modulus: 5 }],
        num_hashes: 3,
        p1: 31,
        p2: 37,
        table_rows: 7,
        d_hash: 3,
    };
    let cfg = ScorerConfig {
        d_model: 4,
        prefix_window: 2,
        seed: instance,
    };
    let mut p = ScorerParams::new(cfg, layout(&vocab, &chain), hash, N_BOS, N_ITEMS).expect("tiny scorer");
    randomize(&mut p, instance ^ 0x5eed);
    p
}

pub fn random_sample(params: &ScorerParams, rng: &mut ChaCha8Rng) -> Sample {
    let m = params.layout.attr_chain.len();
    let tokens: Vec<u32> = params.layout.step_vocab.iter().map(|&v| rng.random_range(0..v as u32)).collect();
    let n_beh = rng.random_range(0..4usize);
    Sample {
        request_id: format!("r{}", rng.random::<u32>()),
        behavior: (0..n_beh).map(|_| rng.random_range(0..N_ITEMS)).collect(),
        target: TokenSequence {
            item_id: rng.random_range(0..N_ITEMS as u64),
            bos: rng.random_range(0..N_BOS as u32),
            attrs: tokens[..m].to_vec(),
            sids: tokens[m..].to_vec(),
        },
        alpha: rng.random_range(0.5..2.0),
        is_order: false,
        metrics: BTreeMap::new(),
    }
}

pub fn random_pair(params: &ScorerParams, rng: &mut ChaCha8Rng) -> DpoExample {
    let winner = random_sample(params, rng);
    let mut loser = random_sample(params, rng);
    loser.behavior = winner.behavior.clone();
    loser.target.bos = winner.target.bos;
    loser.request_id = winner.request_id.clone();
    DpoExample { winner, loser }
}
