//! Position-factorized categorical policies over fixed-length responses.
//!
//! A policy holds one logit row per (context, position). The probability of
//! a response is the product of per-position softmax probabilities, so the
//! full distribution over `V^L` responses can be enumerated exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{log_softmax_slice, log_sum_exp, softmax_slice};

pub const DEFAULT_ENUMERATION_CAP: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub max_len: usize,
}

impl Vocab {
    pub fn new(size: usize, max_len: usize) -> Result<Self> {
        if size == 0 || max_len == 0 {
            return Err(Error::InvalidParameter(
                "vocabulary size and response length must be positive".into(),
            ));
        }
        Ok(Self { size, max_len })
    }

    /// `V^L`, saturating.
    pub fn response_count(&self) -> u128 {
        (self.size as u128).saturating_pow(self.max_len as u32)
    }

    pub fn check_enumerable(&self, cap: usize) -> Result<usize> {
        let count = self.response_count();
        if count > cap as u128 {
            return Err(Error::EnumerationCap { count, cap });
        }
        Ok(count as usize)
    }
}

/// A fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(pub Vec<u32>);

impl Response {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.0.len() != vocab.max_len {
            return Err(Error::InvalidResponse(format!(
                "length {} but responses have length {}",
                self.0.len(),
                vocab.max_len
            )));
        }
        if let Some(t) = self.0.iter().find(|&&t| t as usize >= vocab.size) {
            return Err(Error::InvalidResponse(format!(
                "token {t} outside vocabulary of size {}",
                vocab.size
            )));
        }
        Ok(())
    }
}

/// All `V^L` responses in lexicographic order.
pub fn enumerate_responses(vocab: &Vocab, cap: usize) -> Result<Vec<Response>> {
    let count = vocab.check_enumerable(cap)?;
    let mut out = Vec::with_capacity(count);
    let mut current = vec![0u32; vocab.max_len];
    for _ in 0..count {
        out.push(Response(current.clone()));
        // odometer increment, last position fastest
        for pos in (0..vocab.max_len).rev() {
            current[pos] += 1;
            if (current[pos] as usize) < vocab.size {
                break;
            }
            current[pos] = 0;
        }
    }
    Ok(out)
}

/// Per-context table of log-softmax values, shape `[L][V]`.
#[derive(Debug, Clone)]
pub struct LogProbTable {
    vocab: Vocab,
    values: Vec<f64>,
}

impl LogProbTable {
    pub fn log_prob(&self, y: &Response) -> f64 {
        let v = self.vocab.size;
        y.0.iter()
            .enumerate()
            .map(|(t, &tok)| self.values[t * v + tok as usize])
            .sum()
    }

    pub fn row(&self, position: usize) -> &[f64] {
        let v = self.vocab.size;
        &self.values[position * v..(position + 1) * v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPolicy {
    contexts: usize,
    vocab: Vocab,
    logits: Vec<f64>,
}

impl FactorizedPolicy {
    pub fn from_logits(contexts: usize, vocab: Vocab, logits: Vec<f64>) -> Result<Self> {
        if contexts == 0 {
            return Err(Error::InvalidParameter(
                "policy needs at least one context".into(),
            ));
        }
        let expected = contexts * vocab.max_len * vocab.size;
        if logits.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} logits for C={contexts}, L={}, V={}, got {}",
                vocab.max_len,
                vocab.size,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy logits"));
        }
        Ok(Self {
            contexts,
            vocab,
            logits,
        })
    }

    pub fn uniform(contexts: usize, vocab: Vocab) -> Self {
        Self {
            contexts,
            vocab,
            logits: vec![0.0; contexts * vocab.max_len * vocab.size],
        }
    }

    /// Logits drawn i.i.d. from `N(0, scale²)`.
    pub fn random(contexts: usize, vocab: Vocab, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..contexts * vocab.max_len * vocab.size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self {
            contexts,
            vocab,
            logits,
        }
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn block_len(&self) -> usize {
        self.vocab.max_len * self.vocab.size
    }

    pub fn check_context(&self, x: usize) -> Result<()> {
        if x >= self.contexts {
            return Err(Error::ContextOutOfRange {
                context: x,
                contexts: self.contexts,
            });
        }
        Ok(())
    }

    /// Logits of context `x`, shape `[L][V]`.
    pub fn context_logits(&self, x: usize) -> Result<&[f64]> {
        self.check_context(x)?;
        let n = self.block_len();
        Ok(&self.logits[x * n..(x + 1) * n])
    }

    pub fn context_logits_mut(&mut self, x: usize) -> Result<&mut [f64]> {
        self.check_context(x)?;
        let n = self.block_len();
        Ok(&mut self.logits[x * n..(x + 1) * n])
    }

    pub fn same_shape(&self, other: &FactorizedPolicy) -> Result<()> {
        if self.contexts != other.contexts || self.vocab != other.vocab {
            return Err(Error::ShapeMismatch(format!(
                "policy (C={}, V={}, L={}) vs (C={}, V={}, L={})",
                self.contexts,
                self.vocab.size,
                self.vocab.max_len,
                other.contexts,
                other.vocab.size,
                other.vocab.max_len
            )));
        }
        Ok(())
    }

    pub fn log_prob_table(&self, x: usize) -> Result<LogProbTable> {
        let block = self.context_logits(x)?;
        let v = self.vocab.size;
        let values = block.chunks(v).flat_map(log_softmax_slice).collect();
        Ok(LogProbTable {
            vocab: self.vocab,
            values,
        })
    }

    /// Exact `log π(y|x)`.
    pub fn log_prob(&self, x: usize, y: &Response) -> Result<f64> {
        y.validate(&self.vocab)?;
        let block = self.context_logits(x)?;
        let v = self.vocab.size;
        Ok(y.0
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let row = &block[t * v..(t + 1) * v];
                row[tok as usize] - log_sum_exp(row)
            })
            .sum())
    }

    /// `∂ log π(y|x) / ∂ logits[x]`, shape `[L][V]`:
    /// `1{y_t = v} − softmax(logits[x][t])[v]`.
    pub fn log_prob_grad(&self, x: usize, y: &Response) -> Result<Vec<f64>> {
        y.validate(&self.vocab)?;
        let block = self.context_logits(x)?;
        let v = self.vocab.size;
        let mut grad = Vec::with_capacity(block.len());
        for (t, row) in block.chunks(v).enumerate() {
            let probs = softmax_slice(row);
            grad.extend(probs.iter().enumerate().map(|(i, p)| {
                if i == y.0[t] as usize {
                    1.0 - p
                } else {
                    -p
                }
            }));
        }
        Ok(grad)
    }

    /// Draws `k` i.i.d. responses from the temperature-scaled policy.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        x: usize,
        k: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<Response>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let block = self.context_logits(x)?;
        let v = self.vocab.size;
        let rows: Vec<Vec<f64>> = block
            .chunks(v)
            .map(|row| {
                let scaled: Vec<f64> = row.iter().map(|l| l / temperature).collect();
                softmax_slice(&scaled)
            })
            .collect();
        Ok((0..k)
            .map(|_| Response(rows.iter().map(|p| draw_categorical(p, rng)).collect()))
            .collect())
    }

    /// Seeded convenience wrapper around [`FactorizedPolicy::sample_with`].
    pub fn sample_responses(
        &self,
        x: usize,
        k: usize,
        seed: u64,
        temperature: f64,
    ) -> Result<Vec<Response>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(x, k, temperature, &mut rng)
    }

    /// Argmax token at every position (lowest index on ties).
    pub fn greedy(&self, x: usize) -> Result<Response> {
        let block = self.context_logits(x)?;
        Ok(Response(
            block
                .chunks(self.vocab.size)
                .map(|row| {
                    let mut best = 0;
                    for (i, l) in row.iter().enumerate() {
                        if *l > row[best] {
                            best = i;
                        }
                    }
                    best as u32
                })
                .collect(),
        ))
    }

    /// Exact `KL[π(·|x) ‖ ref(·|x)]` as a sum of per-position categorical KLs.
    pub fn exact_kl(&self, reference: &FactorizedPolicy, x: usize) -> Result<f64> {
        self.same_shape(reference)?;
        let p = self.log_prob_table(x)?;
        let q = reference.log_prob_table(x)?;
        let kl: f64 = p
            .values
            .iter()
            .zip(&q.values)
            .map(|(lp, lq)| lp.exp() * (lp - lq))
            .sum();
        Ok(kl.max(0.0))
    }

    /// Same quantity as [`FactorizedPolicy::exact_kl`] but summed over every
    /// response explicitly.
    pub fn exact_kl_enumerated(
        &self,
        reference: &FactorizedPolicy,
        x: usize,
        cap: usize,
    ) -> Result<f64> {
        self.same_shape(reference)?;
        let p = self.log_prob_table(x)?;
        let q = reference.log_prob_table(x)?;
        let kl: f64 = enumerate_responses(&self.vocab, cap)?
            .iter()
            .map(|y| {
                let lp = p.log_prob(y);
                lp.exp() * (lp - q.log_prob(y))
            })
            .sum();
        Ok(kl.max(0.0))
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // rounding left u above the accumulated mass; pick the last non-zero entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u32
}

/// `β (log π(y|x) − log π_ref(y|x))`: the implicit reward without its
/// `β log Z(x)` offset.
pub fn implicit_reward_hat(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    x: usize,
    y: &Response,
    beta: f64,
) -> Result<f64> {
    policy.same_shape(reference)?;
    check_beta(beta)?;
    Ok(beta * (policy.log_prob(x, y)? - reference.log_prob(x, y)?))
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

/// `log Σ_y π_ref(y|x) exp(r(x, y)/β)` by enumeration.
pub fn exact_log_partition<F>(
    reference: &FactorizedPolicy,
    x: usize,
    reward_fn: F,
    beta: f64,
    cap: usize,
) -> Result<f64>
where
    F: Fn(&Response) -> f64,
{
    check_beta(beta)?;
    let table = reference.log_prob_table(x)?;
    let terms: Vec<f64> = enumerate_responses(&reference.vocab, cap)?
        .iter()
        .map(|y| table.log_prob(y) + reward_fn(y) / beta)
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Gradient with respect to every logit of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    contexts: usize,
    vocab: Vocab,
    values: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(policy: &FactorizedPolicy) -> Self {
        Self {
            contexts: policy.contexts,
            vocab: policy.vocab,
            values: vec![0.0; policy.logits.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn context_block(&self, x: usize) -> &[f64] {
        let n = self.vocab.max_len * self.vocab.size;
        &self.values[x * n..(x + 1) * n]
    }

    /// Adds `scale · block` into the rows of context `x`.
    pub fn add_to_context(&mut self, x: usize, block: &[f64], scale: f64) {
        let n = self.vocab.max_len * self.vocab.size;
        for (g, b) in self.values[x * n..(x + 1) * n].iter_mut().zip(block) {
            *g += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &PolicyGrad) {
        for (g, o) in self.values.iter_mut().zip(&other.values) {
            *g += o;
        }
    }

    pub fn check_shape(&self, policy: &FactorizedPolicy) -> Result<()> {
        if self.contexts != policy.contexts || self.vocab != policy.vocab {
            return Err(Error::ShapeMismatch(
                "gradient does not match policy".into(),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
