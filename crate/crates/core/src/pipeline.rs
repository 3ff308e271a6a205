//! End-to-end stages over a run directory. Every stage reads the artifacts of
//! the previous ones and stamps its outputs with the config digest and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{align_epoch, build_dpo_pairs, PreferencePair};
use crate::analysis::{entropy_report, exposure_report, EntropyReport, ExposureReport, WeightedPath};
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, generate_interactions, InteractionLog, ItemCorpus};
use crate::dataset::{build_dataset, dpo_examples, item_sequences, split_log, Dataset, RequestContext};
use crate::decoder::{beam_search, build_trie, Candidate, ConditionedScorer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::jsonl;
use crate::quantizer::{capacity_constrained_rq, load_sids, save_sids, Codebook, LayerReport, RqOutput, SemanticId};
use crate::scorer::{train_epoch, AdamW, Checkpoint, Sample, ScorerParams};
use crate::tokenizer::{task_bos_token, SequenceLayout, TokenSequence};

pub const CORPUS: &str = "corpus.jsonl";
pub const INTERACTIONS: &str = "interactions.jsonl";
pub const CODEBOOK: &str = "codebook.json";
pub const SIDS: &str = "sids.jsonl";
pub const QUANTIZER_REPORT: &str = "quantizer_report.json";
pub const ANALYSIS: &str = "analysis.json";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const TRAIN_SAMPLES: &str = "train.jsonl";
pub const EVAL_SAMPLES: &str = "eval.jsonl";
pub const CONTEXTS: &str = "contexts.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const PAIRS: &str = "pairs.jsonl";
pub const ALIGNED: &str = "aligned.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const REPORT: &str = "report.json";
pub const ABLATION: &str = "ablation.json";

/// Sidecar written next to every artifact as `<name>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub config_digest: String,
    pub seed: u64,
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn stamp(path: &Path, cfg: &RunConfig) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = ArtifactMeta {
        artifact: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    jsonl::write_json(&meta_path(path), &meta)
}

/// Fails when an input artifact is missing.
fn input(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing input artifact"),
        ));
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerReport {
    pub tau: Option<f64>,
    pub strict: bool,
    pub layers: Vec<LayerReport>,
    pub config_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub exposure: ExposureReport,
    pub entropy: EntropyReport,
    pub config_digest: String,
    pub seed: u64,
}

/// One ranked candidate of one decoded request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedCandidate {
    pub request_id: String,
    pub rank: usize,
    pub path: Vec<u32>,
    pub logprob: f64,
    pub item_ids: Vec<u64>,
}

pub fn layout_for(cfg: &RunConfig, corpus: &ItemCorpus) -> Result<SequenceLayout> {
    SequenceLayout::new(&cfg.tokenizer.attr_chain, corpus.vocab(), cfg.quantizer.layers, cfg.quantizer.k)
}

pub fn quantize_corpus(cfg: &RunConfig, corpus: &ItemCorpus) -> Result<RqOutput> {
    capacity_constrained_rq(corpus, &cfg.rq_options())
}

/// Attribute tokens (in chain order) and SID codes of every item.
pub fn weighted_paths(corpus: &ItemCorpus, sequences: &[TokenSequence]) -> Vec<WeightedPath> {
    corpus
        .items()
        .iter()
        .zip(sequences)
        .map(|(item, seq)| WeightedPath {
            attrs: seq.attrs.clone(),
            sid: seq.sids.clone(),
            weight: item.exposure_weight,
        })
        .collect()
}

/// Weights aligned with `sids` (which need not follow corpus order).
pub fn sid_weights(corpus: &ItemCorpus, sids: &[SemanticId]) -> Result<Vec<f64>> {
    let position = corpus.position_of();
    sids.iter()
        .map(|s| {
            position
                .get(&s.item_id)
                .map(|&p| corpus.items()[p].exposure_weight)
                .ok_or_else(|| Error::Unknown {
                    kind: "item_id",
                    value: s.item_id.to_string(),
                })
        })
        .collect()
}

pub fn init_scorer(cfg: &RunConfig, layout: &SequenceLayout, corpus: &ItemCorpus) -> Result<ScorerParams> {
    let hash = cfg.hash_spec(layout)?;
    ScorerParams::new(
        cfg.scorer_config(),
        layout.clone(),
        hash,
        cfg.tokenizer.registry.num_tokens(),
        corpus.len(),
    )
}

/// NTP training for `scorer.epochs` epochs; returns the batch loss trace.
pub fn train_ntp(cfg: &RunConfig, params: &mut ScorerParams, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(cfg.optimizer(), params)?;
    let mut trace = Vec::new();
    for epoch in 0..cfg.scorer.epochs {
        trace.extend(train_epoch(params, &mut opt, samples, epoch as u64)?);
    }
    Ok(trace)
}

/// Joint RFT + DPO fine-tuning against a frozen copy of `params`.
pub fn align_scorer(
    cfg: &RunConfig,
    params: &mut ScorerParams,
    dataset: &Dataset,
    train_log: &InteractionLog,
    corpus: &ItemCorpus,
    sids: &[SemanticId],
) -> Result<(Vec<PreferencePair>, Vec<f64>)> {
    let pairs = build_dpo_pairs(train_log, cfg.alignment.pairs_per_request, cfg.seed)?;
    let examples = dpo_examples(dataset, &pairs, corpus, sids, &params.layout)?;
    let reference = params.clone();
    let mut opt = AdamW::new(cfg.optimizer(), params)?;
    let mut trace = Vec::new();
    for epoch in 0..cfg.alignment.epochs {
        trace.extend(align_epoch(
            params,
            &reference,
            &mut opt,
            &dataset.train,
            &examples,
            &cfg.alignment,
            epoch as u64,
        )?);
    }
    Ok((pairs, trace))
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        ks: cfg.eval.ks.clone(),
        beam_width: cfg.decoder.beam_width,
        config_digest: Some(cfg.digest()),
        seed: cfg.seed,
    }
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let synth = cfg.synth();
    let corpus = generate_corpus(&synth)?;
    let log = generate_interactions(&corpus, &synth)?;
    let path = dir.join(CORPUS);
    corpus.save(&path)?;
    stamp(&path, cfg)?;
    let path = dir.join(INTERACTIONS);
    log.save(&path)?;
    stamp(&path, cfg)
}

pub fn quantize(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let out = quantize_corpus(cfg, &corpus)?;
    let path = dir.join(CODEBOOK);
    out.codebook.save(&path)?;
    stamp(&path, cfg)?;
    let path = dir.join(SIDS);
    save_sids(&path, &out.sids)?;
    stamp(&path, cfg)?;
    let report = QuantizerReport {
        tau: cfg.quantizer.tau,
        strict: cfg.quantizer.strict,
        layers: out.layers,
        config_digest: cfg.digest(),
        seed: cfg.seed,
    };
    let path = dir.join(QUANTIZER_REPORT);
    jsonl::write_json(&path, &report)?;
    stamp(&path, cfg)
}

pub fn analyze(cfg: &RunConfig, dir: &Path) -> Result<AnalysisReport> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let sids = load_sids(&input(dir, SIDS)?)?;
    let layout = layout_for(cfg, &corpus)?;
    let sequences = item_sequences(&corpus, &sids, &layout)?;
    let report = AnalysisReport {
        exposure: exposure_report(&sids, &sid_weights(&corpus, &sids)?)?,
        entropy: entropy_report(&weighted_paths(&corpus, &sequences))?,
        config_digest: cfg.digest(),
        seed: cfg.seed,
    };
    let path = dir.join(ANALYSIS);
    jsonl::write_json(&path, &report)?;
    stamp(&path, cfg)?;
    Ok(report)
}

pub fn build_seqs(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let log = InteractionLog::load(&input(dir, INTERACTIONS)?)?;
    let sids = load_sids(&input(dir, SIDS)?)?;
    Codebook::load(&input(dir, CODEBOOK)?)?;
    let layout = layout_for(cfg, &corpus)?;
    let sequences = item_sequences(&corpus, &sids, &layout)?;
    let ds = build_dataset(&corpus, &sids, &log, &layout, &cfg.tokenizer.registry, &cfg.dataset_options())?;
    let path = dir.join(SEQUENCES);
    jsonl::write_jsonl(&path, &sequences)?;
    stamp(&path, cfg)?;
    let path = dir.join(TRAIN_SAMPLES);
    jsonl::write_jsonl(&path, &ds.train)?;
    stamp(&path, cfg)?;
    let path = dir.join(EVAL_SAMPLES);
    jsonl::write_jsonl(&path, &ds.eval)?;
    stamp(&path, cfg)?;
    let path = dir.join(CONTEXTS);
    jsonl::write_json(&path, &ds.contexts)?;
    stamp(&path, cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: jsonl::read_jsonl(&input(dir, TRAIN_SAMPLES)?)?,
        eval: jsonl::read_jsonl(&input(dir, EVAL_SAMPLES)?)?,
        contexts: jsonl::read_json::<BTreeMap<String, RequestContext>>(&input(dir, CONTEXTS)?)?,
    })
}

pub fn train(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let ds = load_dataset(dir)?;
    let layout = layout_for(cfg, &corpus)?;
    let mut params = init_scorer(cfg, &layout, &corpus)?;
    let trace = train_ntp(cfg, &mut params, &ds.train)?;
    let ckpt = Checkpoint::new(params, Some(cfg.digest()), cfg.seed, trace);
    let path = dir.join(CHECKPOINT);
    ckpt.save(&path)?;
    stamp(&path, cfg)?;
    Ok(ckpt)
}

pub fn align(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let log = InteractionLog::load(&input(dir, INTERACTIONS)?)?;
    let sids = load_sids(&input(dir, SIDS)?)?;
    let ds = load_dataset(dir)?;
    let mut params = Checkpoint::load(&input(dir, CHECKPOINT)?)?.params;
    let (train_log, _) = split_log(&log, cfg.eval.eval_fraction)?;
    let (pairs, trace) = align_scorer(cfg, &mut params, &ds, &train_log, &corpus, &sids)?;
    let path = dir.join(PAIRS);
    jsonl::write_jsonl(&path, &pairs)?;
    stamp(&path, cfg)?;
    let ckpt = Checkpoint::new(params, Some(cfg.digest()), cfg.seed, trace);
    let path = dir.join(ALIGNED);
    ckpt.save(&path)?;
    stamp(&path, cfg)?;
    Ok(ckpt)
}

/// The aligned checkpoint when present, otherwise the NTP one.
fn latest_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let aligned = dir.join(ALIGNED);
    if aligned.exists() {
        Checkpoint::load(&aligned)
    } else {
        Checkpoint::load(&input(dir, CHECKPOINT)?)
    }
}

/// Beam search for every held-out request.
pub fn decode(cfg: &RunConfig, dir: &Path) -> Result<Vec<DecodedCandidate>> {
    let params = latest_checkpoint(dir)?.params;
    let sequences: Vec<TokenSequence> = jsonl::read_jsonl(&input(dir, SEQUENCES)?)?;
    let ds = load_dataset(dir)?;
    let trie = build_trie(&sequences)?;
    let task_bos = cfg
        .decoder
        .task
        .as_ref()
        .map(|t| task_bos_token(&cfg.tokenizer.registry, t))
        .transpose()?;
    let mut requests: Vec<&str> = ds.eval.iter().map(|s| s.request_id.as_str()).collect();
    requests.dedup();
    let mut out = Vec::new();
    for rid in requests {
        let ctx = &ds.contexts[rid];
        let model = ConditionedScorer::new(&params, &ctx.behavior, task_bos.unwrap_or(ctx.bos))?;
        let cands: Vec<Candidate> = beam_search(&model, &trie, cfg.decoder.beam_width, cfg.decoder.top_k)?;
        out.extend(cands.into_iter().enumerate().map(|(rank, c)| DecodedCandidate {
            request_id: rid.to_string(),
            rank,
            path: c.path,
            logprob: c.logprob,
            item_ids: c.item_ids,
        }));
    }
    let path = dir.join(CANDIDATES);
    jsonl::write_jsonl(&path, &out)?;
    stamp(&path, cfg)?;
    Ok(out)
}

pub fn eval(cfg: &RunConfig, dir: &Path) -> Result<EvalReport> {
    let params = latest_checkpoint(dir)?.params;
    let sequences: Vec<TokenSequence> = jsonl::read_jsonl(&input(dir, SEQUENCES)?)?;
    let ds = load_dataset(dir)?;
    let trie = build_trie(&sequences)?;
    let report = evaluate(&params, &trie, &params.layout, &ds.eval, &eval_options(cfg))?;
    let path = dir.join(REPORT);
    jsonl::write_json(&path, &report)?;
    stamp(&path, cfg)?;
    Ok(report)
}

pub fn ablate(cfg: &RunConfig, dir: &Path) -> Result<crate::eval::AblationReport> {
    let corpus = ItemCorpus::load(&input(dir, CORPUS)?)?;
    let log = InteractionLog::load(&input(dir, INTERACTIONS)?)?;
    let report = crate::eval::ablation_run(cfg, &corpus, &log, &crate::eval::default_grid())?;
    let path = dir.join(ABLATION);
    jsonl::write_json(&path, &report)?;
    stamp(&path, cfg)?;
    Ok(report)
}

/// Every stage in order, ending with the evaluation report.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<EvalReport> {
    gen_data(cfg, dir)?;
    quantize(cfg, dir)?;
    analyze(cfg, dir)?;
    build_seqs(cfg, dir)?;
    train(cfg, dir)?;
    align(cfg, dir)?;
    decode(cfg, dir)?;
    eval(cfg, dir)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.n_items = 150;
        cfg.corpus.d_emb = 4;
        cfg.corpus.n_clusters_true = 8;
        cfg.corpus.n_requests = 120;
        cfg.corpus.n_users = 20;
        cfg.quantizer.layers = 2;
        cfg.quantizer.k = 4;
        cfg.quantizer.tau = Some(1.2);
        cfg.scorer.d_model = 8;
        cfg.scorer.epochs = 1;
        cfg.scorer.optimizer.batch_size = 32;
        cfg.tokenizer.d_hash = 4;
        cfg.decoder.beam_width = 10;
        cfg.decoder.top_k = 5;
        cfg.eval.ks = vec![1, 5, 10];
        cfg
    }

    #[test]
    fn stages_write_stamped_artifacts() {
        let cfg = small_config();
        let tmp = tempfile::tempdir().unwrap();
        let report = run_all(&cfg, tmp.path()).unwrap();
        assert_eq!(report.config_digest.as_deref(), Some(cfg.digest().as_str()));
        for name in [
            CORPUS, INTERACTIONS, CODEBOOK, SIDS, QUANTIZER_REPORT, ANALYSIS, SEQUENCES, TRAIN_SAMPLES, EVAL_SAMPLES,
            CONTEXTS, CHECKPOINT, PAIRS, ALIGNED, CANDIDATES, REPORT,
        ] {
            let path = tmp.path().join(name);
            let meta: ArtifactMeta = jsonl::read_json(&meta_path(&path)).unwrap();
            assert_eq!(meta.config_digest, cfg.digest(), "{name}");
            assert_eq!(meta.seed, cfg.seed);
            assert_eq!(meta.sha256, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
        }
        let cands: Vec<DecodedCandidate> = jsonl::read_jsonl(&tmp.path().join(CANDIDATES)).unwrap();
        assert!(!cands.is_empty());
        assert!(cands.iter().all(|c| c.rank < cfg.decoder.top_k && c.logprob.is_finite()));
    }

    #[test]
    fn missing_inputs_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let err = quantize(&small_config(), tmp.path()).unwrap_err();
        assert!(err.to_string().contains(CORPUS), "{err}");
    }
}
