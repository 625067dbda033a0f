//! The toy world: vocabulary, prompts, reference policy and ground-truth judge.
//!
//! Prompts are the unit of data and evaluation; each prompt is bound to one
//! policy context. Train, validation and test prompts share the
//! in-distribution contexts, while out-of-distribution prompts live on
//! separate contexts whose ground-truth hidden weight is shifted.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{FeatureMap, JudgeModel, DEFAULT_HIDDEN_WEIGHT};
use crate::policy::{FactorizedPolicy, Vocab, DEFAULT_ENUMERATION_CAP};

/// SplitMix64 finalizer used to derive independent per-item seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSplit {
    pub train: Vec<Prompt>,
    pub valid: Vec<Prompt>,
    pub test: Vec<Prompt>,
    pub ood: Vec<Prompt>,
}

impl PromptSplit {
    /// Prompt ids must be pairwise disjoint across the four sets.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .chain(&self.ood)
        {
            if !seen.insert(p.id) {
                return Err(Error::OverlappingSplits(p.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// In-distribution contexts.
    pub contexts: usize,
    pub ood_contexts: usize,
    pub train_prompts: usize,
    pub valid_prompts: usize,
    pub test_prompts: usize,
    pub ood_prompts: usize,
    pub gt_seed: u64,
    pub ref_seed: u64,
    /// Standard deviation of the reference policy logits.
    pub ref_logit_scale: f64,
    pub hidden_weight: f64,
    pub ood_hidden_shift: f64,
    pub enumeration_cap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            max_len: 4,
            contexts: 8,
            ood_contexts: 4,
            train_prompts: 64,
            valid_prompts: 16,
            test_prompts: 32,
            ood_prompts: 16,
            gt_seed: 1,
            ref_seed: 2,
            ref_logit_scale: 0.5,
            hidden_weight: DEFAULT_HIDDEN_WEIGHT,
            ood_hidden_shift: 1.0,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub config: EnvConfig,
    pub vocab: Vocab,
    pub feature_map: FeatureMap,
    pub reference: FactorizedPolicy,
    pub gt: JudgeModel,
    pub split: PromptSplit,
}

impl ToyEnv {
    pub fn build(config: &EnvConfig) -> Result<Self> {
        let vocab = Vocab::new(config.vocab_size, config.max_len)?;
        if config.contexts == 0 {
            return Err(Error::InvalidParameter("need at least one context".into()));
        }
        if config.ood_prompts > 0 && config.ood_contexts == 0 {
            return Err(Error::InvalidParameter(
                "ood prompts need at least one ood context".into(),
            ));
        }
        if config.train_prompts == 0 || config.valid_prompts == 0 {
            return Err(Error::InvalidParameter(
                "train and validation prompt sets must be non-empty".into(),
            ));
        }
        let total_contexts = config.contexts + config.ood_contexts;
        let feature_map = FeatureMap::new(total_contexts, vocab);
        let ood: Vec<usize> = (config.contexts..total_contexts).collect();
        let gt = JudgeModel::ground_truth(
            feature_map,
            config.gt_seed,
            config.hidden_weight,
            &ood,
            config.ood_hidden_shift,
        )?;
        let reference = FactorizedPolicy::random(
            total_contexts,
            vocab,
            config.ref_logit_scale,
            config.ref_seed,
        );

        let mut next_id = 0;
        let mut make = |n: usize, base: usize, span: usize| -> Vec<Prompt> {
            let out = (0..n)
                .map(|i| Prompt {
                    id: next_id + i,
                    context: base + i % span.max(1),
                })
                .collect();
            next_id += n;
            out
        };
        let split = PromptSplit {
            train: make(config.train_prompts, 0, config.contexts),
            valid: make(config.valid_prompts, 0, config.contexts),
            test: make(config.test_prompts, 0, config.contexts),
            ood: make(config.ood_prompts, config.contexts, config.ood_contexts),
        };
        split.validate()?;
        Ok(Self {
            config: config.clone(),
            vocab,
            feature_map,
            reference,
            gt,
            split,
        })
    }

    pub fn cap(&self) -> usize {
        self.config.enumeration_cap
    }
}
