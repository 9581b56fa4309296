use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lrf_core::compgen::CorpusSpec;
use lrf_core::training::TrainConfig;
use lrf_core::{LrfVariant, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Output-token limit for greedy decoding.
    pub max_len: usize,
    /// Examples used for the teacher-forced fuse-probability averages.
    pub fuse_prob_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_len: 30,
            fuse_prob_examples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub variants: Vec<LrfVariant>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            variants: vec![
                LrfVariant::VANILLA,
                LrfVariant::LRF,
                LrfVariant::ACCU,
                LrfVariant::ONLY_TOP,
                LrfVariant::ENCODER_ONLY,
                LrfVariant::DECODER_ONLY,
            ],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Everything one run needs. Vocabulary sizes in `model` are filled in
/// from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    /// Existing or target corpus directory; `<out_dir>/corpus` when unset.
    pub corpus_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            corpus_dir: None,
            model: ModelConfig {
                max_len: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 2500,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.out_dir.join("corpus"))
    }

    /// Applies `key=value` with a dotted key. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> anyhow::Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects key=value, got `{assignment}`")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| UsageError(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| UsageError(format!("--set {assignment}: {e}")))?;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: lrf_core::Result<()>| r.map_err(|e| UsageError(e.to_string()));
        check(self.train.validate_hyperparameters())?;
        let probe = ModelConfig {
            src_vocab: self.model.src_vocab.max(1),
            tgt_vocab: self.model.tgt_vocab.max(1),
            ..self.model.clone()
        };
        check(probe.validate())?;
        if self.eval.max_len == 0 {
            return Err(UsageError("eval.max_len must be >= 1".into()).into());
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("train.steps=7").unwrap();
        cfg.set("model.variant=accu").unwrap();
        cfg.set("out_dir=somewhere").unwrap();
        cfg.set("corpus.holdout.compounds=3").unwrap();
        cfg.set("sweep.variants=[\"vanilla\",\"lrf\"]").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.variant, LrfVariant::ACCU);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
        assert_eq!(cfg.corpus.holdout.compounds, 3);
        assert_eq!(cfg.sweep.variants.len(), 2);
        assert!(cfg.set("train.nope=1").is_err());
        assert!(cfg.set("train.steps=many").is_err());
        assert!(cfg.set("noequals").is_err());
    }
}
