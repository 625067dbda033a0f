//! Linear reward models: the synthetic ground-truth judge and learnt
//! Bradley-Terry reward models.
//!
//! Features are laid out in one block of `V + 1` entries per context: the
//! count of every vocabulary symbol in the response, followed by the
//! *hidden* feature, the number of adjacent positions holding the same token.
//! A response scored under context `x` only activates block `x`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{log_sigmoid, sigmoid};
use crate::objectives::PreferenceExample;
use crate::policy::{Response, Vocab};

/// Default weight of the hidden feature in the ground-truth judge.
pub const DEFAULT_HIDDEN_WEIGHT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub contexts: usize,
    pub vocab: Vocab,
}

impl FeatureMap {
    pub fn new(contexts: usize, vocab: Vocab) -> Self {
        Self { contexts, vocab }
    }

    pub fn block_len(&self) -> usize {
        self.vocab.size + 1
    }

    pub fn dim(&self) -> usize {
        self.contexts * self.block_len()
    }

    pub fn hidden_index(&self, context: usize) -> usize {
        context * self.block_len() + self.vocab.size
    }

    /// Local (within-block) features of a response.
    pub fn local_features(&self, y: &Response) -> Vec<f64> {
        let mut f = vec![0.0; self.block_len()];
        for &t in y.tokens() {
            f[t as usize] += 1.0;
        }
        f[self.vocab.size] = y.tokens().windows(2).filter(|w| w[0] == w[1]).count() as f64;
        f
    }

    /// Dense `d`-vector of features.
    pub fn features(&self, context: usize, y: &Response) -> Result<Vec<f64>> {
        self.check(context, y)?;
        let mut f = vec![0.0; self.dim()];
        let start = context * self.block_len();
        f[start..start + self.block_len()].copy_from_slice(&self.local_features(y));
        Ok(f)
    }

    fn check(&self, context: usize, y: &Response) -> Result<()> {
        if context >= self.contexts {
            return Err(Error::ContextOutOfRange {
                context,
                contexts: self.contexts,
            });
        }
        y.validate(&self.vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeLabel {
    GroundTruth,
    Learnt,
}

/// Which features a learnt reward model may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMask {
    Full,
    /// Everything except the hidden feature of every context.
    NoHidden,
    Empty,
    Indices(BTreeSet<usize>),
}

impl FeatureMask {
    pub fn resolve(&self, map: &FeatureMap) -> Vec<bool> {
        let d = map.dim();
        match self {
            FeatureMask::Full => vec![true; d],
            FeatureMask::Empty => vec![false; d],
            FeatureMask::NoHidden => (0..d)
                .map(|i| i % map.block_len() != map.vocab.size)
                .collect(),
            FeatureMask::Indices(set) => (0..d).map(|i| set.contains(&i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeModel {
    pub id: String,
    pub label: JudgeLabel,
    pub feature_map: FeatureMap,
    weights: Vec<f64>,
    mask: Vec<bool>,
}

/// Serialized form: `{d, mask, weights, label}` plus the feature layout.
#[derive(Serialize, Deserialize)]
struct JudgeRecord {
    id: String,
    label: JudgeLabel,
    feature_map: FeatureMap,
    d: usize,
    mask: Vec<usize>,
    weights: Vec<f64>,
}

impl JudgeModel {
    pub fn new(
        id: impl Into<String>,
        label: JudgeLabel,
        feature_map: FeatureMap,
        weights: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let d = feature_map.dim();
        if weights.len() != d || mask.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "judge needs {d} weights and mask entries, got {} and {}",
                weights.len(),
                mask.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("judge weights"));
        }
        let mut weights = weights;
        for (w, m) in weights.iter_mut().zip(&mask) {
            if !m {
                *w = 0.0;
            }
        }
        Ok(Self {
            id: id.into(),
            label,
            feature_map,
            weights,
            mask,
        })
    }

    /// Ground-truth judge: per-context token weights drawn from `N(0, 1)`,
    /// hidden-feature weight fixed at `hidden_weight` (shifted by
    /// `ood_hidden_shift` on the contexts listed in `ood_contexts`).
    pub fn ground_truth(
        feature_map: FeatureMap,
        seed: u64,
        hidden_weight: f64,
        ood_contexts: &[usize],
        ood_hidden_shift: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(feature_map.dim());
        for x in 0..feature_map.contexts {
            for _ in 0..feature_map.vocab.size {
                weights.push(StandardNormal.sample(&mut rng));
            }
            let shift = if ood_contexts.contains(&x) {
                ood_hidden_shift
            } else {
                0.0
            };
            weights.push(hidden_weight + shift);
        }
        let d = feature_map.dim();
        Self::new(
            format!("gt-{seed}"),
            JudgeLabel::GroundTruth,
            feature_map,
            weights,
            vec![true; d],
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `w · φ(x, y)` for any judge.
    pub fn reward(&self, context: usize, y: &Response) -> Result<f64> {
        self.feature_map.check(context, y)?;
        Ok(self.reward_unchecked(context, y))
    }

    pub(crate) fn reward_unchecked(&self, context: usize, y: &Response) -> f64 {
        let b = self.feature_map.block_len();
        let w = &self.weights[context * b..(context + 1) * b];
        let v = self.feature_map.vocab.size;
        let mut r = 0.0;
        for &t in y.tokens() {
            r += w[t as usize];
        }
        let repeats = y.tokens().windows(2).filter(|p| p[0] == p[1]).count();
        r + w[v] * repeats as f64
    }

    /// Ground-truth score; rejects learnt models.
    pub fn gt_reward(&self, context: usize, y: &Response) -> Result<f64> {
        if self.label != JudgeLabel::GroundTruth {
            return Err(Error::JudgeMismatch(format!(
                "{} is not a ground-truth judge",
                self.id
            )));
        }
        self.reward(context, y)
    }

    /// The same judge with every weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            format!("{}*{s}", self.id),
            self.label,
            self.feature_map,
            self.weights.iter().map(|w| w * s).collect(),
            self.mask.clone(),
        )
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let rec = JudgeRecord {
            id: self.id.clone(),
            label: self.label,
            feature_map: self.feature_map,
            d: self.weights.len(),
            mask: self
                .mask
                .iter()
                .enumerate()
                .filter_map(|(i, m)| m.then_some(i))
                .collect(),
            weights: self.weights.clone(),
        };
        serde_json::to_value(rec).expect("judge record serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let rec: JudgeRecord = serde_json::from_value(value)?;
        if rec.d != rec.feature_map.dim() {
            return Err(Error::ShapeMismatch(format!(
                "judge record claims d={} but layout has {}",
                rec.d,
                rec.feature_map.dim()
            )));
        }
        let mut mask = vec![false; rec.d];
        for i in rec.mask {
            if i >= rec.d {
                return Err(Error::ShapeMismatch(format!("mask index {i} out of range")));
            }
            mask[i] = true;
        }
        Self::new(rec.id, rec.label, rec.feature_map, rec.weights, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RMTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_noise_prob: f64,
}

impl Default for RMTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            label_noise_prob: 0.0,
        }
    }
}

impl RMTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.steps == 0 {
            return Err(Error::InvalidParameter(
                "reward-model training needs a positive rate and step count".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise_prob) {
            return Err(Error::InvalidParameter(format!(
                "label noise must lie in [0, 1), got {}",
                self.label_noise_prob
            )));
        }
        Ok(())
    }
}

/// `φ(chosen) − φ(rejected)` in local block coordinates.
struct PairDiff {
    offset: usize,
    diff: Vec<f64>,
}

fn pair_diffs(map: &FeatureMap, examples: &[PreferenceExample]) -> Result<Vec<PairDiff>> {
    examples
        .iter()
        .map(|ex| {
            let yc = &ex.responses[ex.chosen_idx];
            let yr = &ex.responses[ex.rejected_idx];
            map.check(ex.context, yc)?;
            map.check(ex.context, yr)?;
            let fc = map.local_features(yc);
            let fr = map.local_features(yr);
            Ok(PairDiff {
                offset: ex.context * map.block_len(),
                diff: fc.iter().zip(&fr).map(|(a, b)| a - b).collect(),
            })
        })
        .collect()
}

fn pair_score(weights: &[f64], p: &PairDiff) -> f64 {
    weights[p.offset..p.offset + p.diff.len()]
        .iter()
        .zip(&p.diff)
        .map(|(w, d)| w * d)
        .sum()
}

/// Mean Bradley-Terry log-likelihood `mean log σ(w·(φ_c − φ_r))`.
pub fn bt_log_likelihood(rm: &JudgeModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    let diffs = pair_diffs(&rm.feature_map, examples)?;
    Ok(diffs
        .iter()
        .map(|p| log_sigmoid(pair_score(&rm.weights, p)))
        .sum::<f64>()
        / diffs.len() as f64)
}

/// Fits a linear reward model by minibatch gradient ascent on the
/// Bradley-Terry log-likelihood, restricted to the masked features.
pub fn train_reward_model(
    feature_map: &FeatureMap,
    examples: &[PreferenceExample],
    cfg: &RMTrainConfig,
    mask: &FeatureMask,
) -> Result<JudgeModel> {
    if examples.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    cfg.validate()?;
    let mask = mask.resolve(feature_map);
    let diffs = pair_diffs(feature_map, examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // flipped labels are drawn once, like a noisy annotation pass
    let signs: Vec<f64> = diffs
        .iter()
        .map(|_| {
            if cfg.label_noise_prob > 0.0 && rng.random::<f64>() < cfg.label_noise_prob {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let mut weights = vec![0.0; feature_map.dim()];
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    let mut cursor = order.len();
    let mut grad = vec![0.0; weights.len()];
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch = cfg.batch_size.min(diffs.len());
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let p = &diffs[i];
            let s = signs[i];
            // d/dw log σ(s·w·Δ) = s·σ(−s·w·Δ)·Δ
            let coef = s * sigmoid(-s * pair_score(&weights, p));
            for (j, d) in p.diff.iter().enumerate() {
                grad[p.offset + j] += coef * d;
            }
        }
        let step = cfg.learning_rate / batch as f64;
        for ((w, g), m) in weights.iter_mut().zip(&grad).zip(&mask) {
            if *m {
                *w += step * g;
            }
        }
    }
    JudgeModel::new(
        format!("learnt-{}", cfg.seed),
        JudgeLabel::Learnt,
        *feature_map,
        weights,
        mask,
    )
}

/// Fraction of examples the model ranks chosen above rejected; ties count ½.
pub fn rm_pairwise_accuracy(rm: &JudgeModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    let mut score = 0.0;
    for ex in examples {
        let rc = rm.reward(ex.context, &ex.responses[ex.chosen_idx])?;
        let rr = rm.reward(ex.context, &ex.responses[ex.rejected_idx])?;
        score += if rc > rr {
            1.0
        } else if rc == rr {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / examples.len() as f64)
}
