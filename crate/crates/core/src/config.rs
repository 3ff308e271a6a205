//! Run configuration: one JSON document with a section per module and a
//! single global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignOptions;
use crate::corpus::{AttrField, SynthConfig};
use crate::dataset::DatasetOptions;
use crate::error::{Error, Result};
use crate::quantizer::{CapacityMode, RqOptions, DEFAULT_EPS_CONV, DEFAULT_MAX_ITER};
use crate::scorer::{OptimizerConfig, ScorerConfig};
use crate::tokenizer::{HashSpec, SequenceLayout, StepRef, TaskContext, TaskRegistry, DEFAULT_PAIRS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub layers: usize,
    pub k: usize,
    /// `None` runs the unconstrained baseline.
    pub tau: Option<f64>,
    pub max_iter: usize,
    pub eps_conv: f64,
    pub strict: bool,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            layers: 3,
            k: 16,
            tau: Some(1.05),
            max_iter: DEFAULT_MAX_ITER,
            eps_conv: DEFAULT_EPS_CONV,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub attr_chain: Vec<AttrField>,
    pub registry: TaskRegistry,
    pub d_hash: usize,
    pub num_hashes: usize,
    pub primes: (u64, u64),
    /// Hash pairs as step names, e.g. `["l2", "s0"]`.
    pub pairs: Vec<(String, String)>,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            attr_chain: vec![AttrField::L2, AttrField::L3],
            registry: TaskRegistry::default(),
            d_hash: 16,
            num_hashes: 3,
            primes: (31, 37),
            pairs: DEFAULT_PAIRS.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerSection {
    pub d_model: usize,
    pub prefix_window: usize,
    pub behavior_len: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ScorerSection {
    fn default() -> Self {
        let model = ScorerConfig::default();
        Self {
            d_model: model.d_model,
            prefix_window: model.prefix_window,
            behavior_len: 8,
            epochs: 2,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub beam_width: usize,
    pub top_k: usize,
    /// Overrides every request's task when set.
    pub task: Option<TaskContext>,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            beam_width: 20,
            top_k: 10,
            task: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub eval_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 20],
            eval_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory holding every artifact of the run.
    pub dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: SynthConfig,
    pub quantizer: QuantizerSection,
    pub tokenizer: TokenizerSection,
    pub scorer: ScorerSection,
    pub alignment: AlignOptions,
    pub decoder: DecoderSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: SynthConfig::default(),
            quantizer: QuantizerSection::default(),
            tokenizer: TokenizerSection::default(),
            scorer: ScorerSection::default(),
            alignment: AlignOptions::default(),
            decoder: DecoderSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        let q = &self.quantizer;
        if q.layers == 0 || q.k == 0 {
            return Err(Error::Config("quantizer.layers and quantizer.k must be positive".into()));
        }
        if let Some(tau) = q.tau {
            if !(tau >= 1.0) {
                return Err(Error::Config(format!("quantizer.tau must be >= 1, got {tau}")));
            }
        }
        self.tokenizer.registry.validate()?;
        self.hash_pairs()?;
        if self.scorer.d_model == 0 || self.scorer.epochs == 0 {
            return Err(Error::Config("scorer.d_model and scorer.epochs must be positive".into()));
        }
        self.optimizer().validate()?;
        self.alignment.validate()?;
        let d = &self.decoder;
        if !(d.beam_width >= d.top_k && d.top_k >= 1) {
            return Err(Error::Config(format!(
                "decoder needs beam_width >= top_k >= 1, got {} and {}",
                d.beam_width, d.top_k
            )));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of positive integers".into()));
        }
        if !(0.0..1.0).contains(&self.eval.eval_fraction) {
            return Err(Error::Config(format!(
                "eval.eval_fraction must lie in [0, 1), got {}",
                self.eval.eval_fraction
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn rq_options(&self) -> RqOptions {
        let q = &self.quantizer;
        RqOptions {
            num_layers: q.layers,
            k: q.k,
            tau: q.tau,
            seed: self.seed,
            max_iter: q.max_iter,
            eps_conv: q.eps_conv,
            mode: if q.strict { CapacityMode::Strict } else { CapacityMode::Lenient },
        }
    }

    pub fn hash_pairs(&self) -> Result<Vec<(StepRef, StepRef)>> {
        self.tokenizer
            .pairs
            .iter()
            .map(|(a, b)| Ok((a.parse()?, b.parse()?)))
            .collect()
    }

    pub fn hash_spec(&self, layout: &SequenceLayout) -> Result<HashSpec> {
        let t = &self.tokenizer;
        HashSpec::new(layout, &self.hash_pairs()?, t.num_hashes, t.primes, t.d_hash)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            d_model: self.scorer.d_model,
            prefix_window: self.scorer.prefix_window,
            seed: self.seed,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed,
            ..self.scorer.optimizer.clone()
        }
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            behavior_len: self.scorer.behavior_len,
            eval_fraction: self.eval.eval_fraction,
            alpha_cap: self.alignment.reward.alpha_cap,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "quantizer": {"k": 8}}"#).unwrap();
        assert_eq!(cfg.quantizer.k, 8);
        assert_eq!(cfg.quantizer.layers, 3);
        assert_eq!(cfg.synth().seed, 3);
        assert_eq!(cfg.rq_options().seed, 3);
        assert_eq!(cfg.optimizer().seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"quantizer": {"kk": 8}}"#,
            r#"{"corpus": {"seed": 8}}"#,
            r#"{"scorer": {"optimizer": {"seed": 8}}}"#,
            r#"{"alignment": {"reward": {"bonus": 1}}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn digest_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.alignment.beta = 0.2;
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.decoder.top_k = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.quantizer.tau = Some(0.9);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.tokenizer.pairs = vec![("l9".into(), "s0".into())];
        assert!(cfg.validate().is_err());
    }
}
