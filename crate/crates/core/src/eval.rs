//! Average-reward / win-rate evaluation, out-of-distribution comparison and
//! the reward-hacking monitor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::env::{derive_seed, Prompt, PromptSplit};
use crate::error::{Error, Result};
use crate::judge::JudgeModel;
use crate::policy::{enumerate_responses, FactorizedPolicy, Response};
use crate::training::RunLog;

/// How a policy's reward on a prompt is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DecodeMode {
    /// `Σ_y π(y|x) r(x, y)`, noise-free.
    Exact,
    /// Reward of the argmax-per-position response.
    Greedy,
    /// Mean reward of `samples` draws per prompt, seeded per prompt.
    Sampled { seed: u64, samples: usize },
}

/// Exact expected reward of a policy under a linear judge.
///
/// Token counts and adjacent repeats are both sums of per-position terms, so
/// the expectation factorizes: `E[count_v] = Σ_t p_t(v)` and
/// `E[repeats] = Σ_t Σ_v p_t(v) p_{t+1}(v)`.
pub fn expected_reward(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    context: usize,
) -> Result<f64> {
    if judge.feature_map.vocab != policy.vocab() {
        return Err(Error::ShapeMismatch(
            "judge and policy vocabularies differ".into(),
        ));
    }
    if context >= judge.feature_map.contexts {
        return Err(Error::ContextOutOfRange {
            context,
            contexts: judge.feature_map.contexts,
        });
    }
    let table = policy.log_prob_table(context)?;
    let vocab = policy.vocab();
    let block = judge.feature_map.block_len();
    let w = &judge.weights()[context * block..(context + 1) * block];
    let probs: Vec<Vec<f64>> = (0..vocab.max_len)
        .map(|t| table.row(t).iter().map(|l| l.exp()).collect())
        .collect();
    let mut total = 0.0;
    for row in &probs {
        total += row.iter().zip(w).map(|(p, wv)| p * wv).sum::<f64>();
    }
    let repeats: f64 = probs
        .windows(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    Ok(total + w[vocab.size] * repeats)
}

/// Same expectation by explicit enumeration of every response.
pub fn expected_reward_enumerated(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    context: usize,
    cap: usize,
) -> Result<f64> {
    let table = policy.log_prob_table(context)?;
    let mut total = 0.0;
    for y in enumerate_responses(&policy.vocab(), cap)? {
        total += table.log_prob(&y).exp() * judge.reward(context, &y)?;
    }
    Ok(total)
}

/// Per-prompt rewards under the given decode mode.
pub fn prompt_rewards(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    prompts: &[Prompt],
    decode: DecodeMode,
) -> Result<Vec<f64>> {
    prompts
        .par_iter()
        .map(|p| match decode {
            DecodeMode::Exact => expected_reward(policy, judge, p.context),
            DecodeMode::Greedy => judge.reward(p.context, &policy.greedy(p.context)?),
            DecodeMode::Sampled { seed, samples } => {
                if samples == 0 {
                    return Err(Error::InvalidParameter(
                        "sampled decode needs samples > 0".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, p.id as u64));
                let ys: Vec<Response> = policy.sample_with(p.context, samples, 1.0, &mut rng)?;
                let mut total = 0.0;
                for y in &ys {
                    total += judge.reward(p.context, y)?;
                }
                Ok(total / samples as f64)
            }
        })
        .collect()
}

/// Baseline rewards stored from an earlier evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRewards {
    pub judge_id: String,
    pub decode: DecodeMode,
    pub prompt_ids: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl StoredRewards {
    pub fn compute(
        policy: &FactorizedPolicy,
        judge: &JudgeModel,
        prompts: &[Prompt],
        decode: DecodeMode,
    ) -> Result<Self> {
        Ok(Self {
            judge_id: judge.id.clone(),
            decode,
            prompt_ids: prompts.iter().map(|p| p.id).collect(),
            rewards: prompt_rewards(policy, judge, prompts, decode)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Baseline<'a> {
    Policy(&'a FactorizedPolicy),
    Stored(&'a StoredRewards),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_reward: f64,
    pub win_rate: f64,
    pub ci95_reward: f64,
    pub ci95_winrate: f64,
    pub n_prompts: usize,
    pub judge_id: String,
    pub decode: DecodeMode,
}

/// Half-width of the two-sided 95% t-interval for the mean.
pub fn t_interval_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    t * (var / n as f64).sqrt()
}

/// Half-width of the 95% Wald interval for a proportion.
pub fn wald_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.959_963_984_540_054 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Average reward and win-rate against a baseline; ties count ½.
pub fn evaluate_policy(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    prompts: &[Prompt],
    baseline: Baseline<'_>,
    decode: DecodeMode,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("evaluation prompt set"));
    }
    let ours = prompt_rewards(policy, judge, prompts, decode)?;
    let theirs = match baseline {
        Baseline::Policy(b) => prompt_rewards(b, judge, prompts, decode)?,
        Baseline::Stored(s) => {
            if s.judge_id != judge.id {
                return Err(Error::JudgeMismatch(format!(
                    "baseline scored by {}, policy by {}",
                    s.judge_id, judge.id
                )));
            }
            if s.decode != decode {
                return Err(Error::JudgeMismatch(
                    "baseline evaluated under a different decode mode".into(),
                ));
            }
            let ids: Vec<usize> = prompts.iter().map(|p| p.id).collect();
            if s.prompt_ids != ids {
                return Err(Error::JudgeMismatch(
                    "baseline evaluated on a different prompt set".into(),
                ));
            }
            s.rewards.clone()
        }
    };
    let n = prompts.len();
    let wins: f64 = ours
        .iter()
        .zip(&theirs)
        .map(|(a, b)| {
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    let win_rate = wins / n as f64;
    Ok(EvalReport {
        avg_reward: ours.iter().sum::<f64>() / n as f64,
        win_rate,
        ci95_reward: t_interval_half_width(&ours),
        ci95_winrate: wald_half_width(win_rate, n),
        n_prompts: n,
        judge_id: judge.id.clone(),
        decode,
    })
}

/// In-distribution (test prompts) and out-of-distribution reports.
pub fn ood_eval_pair(
    policy: &FactorizedPolicy,
    judge_in: &JudgeModel,
    judge_ood: &JudgeModel,
    split: &PromptSplit,
    baseline: &FactorizedPolicy,
    decode: DecodeMode,
) -> Result<(EvalReport, EvalReport)> {
    split.validate()?;
    let in_dist = evaluate_policy(
        policy,
        judge_in,
        &split.test,
        Baseline::Policy(baseline),
        decode,
    )?;
    let ood = evaluate_policy(
        policy,
        judge_ood,
        &split.ood,
        Baseline::Policy(baseline),
        decode,
    )?;
    Ok((in_dist, ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum HackingVerdict {
    None,
    HackingDetected { step: usize },
}

pub const DEFAULT_HACKING_WINDOW: usize = 25;
pub const DEFAULT_HACKING_SLOPE: f64 = 1e-3;

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / sxx
}

/// First window `[s, s + window)` where the learnt-RM reward rises and the
/// ground-truth reward falls, both faster than `min_slope` per step.
pub fn reward_hacking_scan(log: &RunLog, window: usize, min_slope: f64) -> Result<HackingVerdict> {
    let records = &log.records;
    if records.iter().any(|r| r.learnt_reward.is_none()) || records.is_empty() {
        return Err(Error::MissingSeries("learnt_reward"));
    }
    for (i, start) in records.iter().enumerate() {
        let end = start.step + window;
        let win: Vec<_> = records[i..].iter().take_while(|r| r.step < end).collect();
        if win.len() < 3 {
            continue;
        }
        let xs: Vec<f64> = win.iter().map(|r| r.step as f64).collect();
        let learnt: Vec<f64> = win.iter().map(|r| r.learnt_reward.unwrap_or(0.0)).collect();
        let gt: Vec<f64> = win.iter().map(|r| r.gt_reward).collect();
        if ols_slope(&xs, &learnt) > min_slope && ols_slope(&xs, &gt) < -min_slope {
            return Ok(HackingVerdict::HackingDetected { step: start.step });
        }
    }
    Ok(HackingVerdict::None)
}
