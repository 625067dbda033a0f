//! Reward-aware preference losses and their gradients.
//!
//! The pair loss compares the implicit margin `β(log π/π_ref)(y_c) −
//! β(log π/π_ref)(y_r)` with the scaled explicit margin `η(r*_c − r*_r)`;
//! the multi-response loss compares whole K-vectors. Gradients take the
//! REINFORCE shape `β Σ_k S_k ∇ log π(y_k|x)`, where `S_k` is the derivative
//! of the distance with respect to the k-th implicit reward.
//!
//! The classic offline losses (DPO, cDPO, IPO, Distill-DPO, SimPO) are also
//! evaluated literally so the correspondences can be checked numerically.
//! Their mapping onto the RPO settings:
//!
//! | loss | RPO setting |
//! |------|-------------|
//! | DPO | `bwd-bernoulli`, explicit margin `+∞` |
//! | cDPO(c) | `bwd-bernoulli`, explicit margin `σ⁻¹(c)`; equal up to the entropy of `Ber(c)` |
//! | IPO | `sq`, explicit margin `½`; `ipo = (2/β²) · rpo` |
//! | Distill-DPO | `sq`; `distill = 2 · rpo` |
//! | SimPO (γ = 0, equal lengths L, uniform reference) | DPO at strength `β/L` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    distance_multi, distance_multi_grad, distance_pair, distance_pair_grad, log_sigmoid, sigmoid,
    MarginPair, MarginTarget, MetricKind, RewardVector,
};
use crate::policy::{check_beta, FactorizedPolicy, PolicyGrad, Response};

/// One prompt with K annotated responses and its chosen/rejected labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt_id: usize,
    pub context: usize,
    pub responses: Vec<Response>,
    pub gt_rewards: RewardVector,
    pub chosen_idx: usize,
    pub rejected_idx: usize,
}

impl PreferenceExample {
    pub fn new(
        prompt_id: usize,
        context: usize,
        responses: Vec<Response>,
        gt_rewards: RewardVector,
        chosen_idx: usize,
        rejected_idx: usize,
    ) -> Result<Self> {
        let ex = Self {
            prompt_id,
            context,
            responses,
            gt_rewards,
            chosen_idx,
            rejected_idx,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.responses.len();
        if k < 2 {
            return Err(Error::TooFewResponses(k));
        }
        if self.gt_rewards.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: self.gt_rewards.len(),
            });
        }
        if self.chosen_idx >= k || self.rejected_idx >= k {
            return Err(Error::InvalidExample(format!(
                "indices ({}, {}) out of range for K={k}",
                self.chosen_idx, self.rejected_idx
            )));
        }
        if self.chosen_idx == self.rejected_idx {
            return Err(Error::InvalidExample("chosen and rejected coincide".into()));
        }
        if self.gt_rewards[self.chosen_idx] < self.gt_rewards[self.rejected_idx] {
            return Err(Error::InvalidExample(
                "chosen reward is below rejected reward".into(),
            ));
        }
        Ok(())
    }

    /// Whether chosen and rejected carry the same reward (e.g. identical samples).
    pub fn is_tied(&self) -> bool {
        self.gt_rewards[self.chosen_idx] == self.gt_rewards[self.rejected_idx]
    }
}

/// Hyperparameters of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub metric: MetricKind,
    /// Implicit-reward scale (KL strength).
    pub beta: f64,
    /// Explicit-reward scale.
    #[serde(default = "one")]
    pub eta: f64,
    /// SimPO margin.
    #[serde(default)]
    pub gamma: f64,
    /// cDPO label confidence.
    #[serde(default = "one")]
    pub c: f64,
    /// Replaces `η(r*_c − r*_r)` in pair losses, e.g. `+∞` for DPO.
    #[serde(default)]
    pub margin_target: Option<MarginTarget>,
}

fn one() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(metric: MetricKind, beta: f64, eta: f64) -> Self {
        Self {
            metric,
            beta,
            eta,
            gamma: 0.0,
            c: 1.0,
            margin_target: None,
        }
    }

    pub fn with_margin_target(mut self, target: MarginTarget) -> Self {
        self.margin_target = Some(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `β log(π/π_ref)` for every response of the example.
pub fn implicit_rewards(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    beta: f64,
) -> Result<RewardVector> {
    policy.same_shape(reference)?;
    let p = policy.log_prob_table(ex.context)?;
    let q = reference.log_prob_table(ex.context)?;
    let vocab = policy.vocab();
    let mut out = Vec::with_capacity(ex.k());
    for y in &ex.responses {
        y.validate(&vocab)?;
        out.push(beta * (p.log_prob(y) - q.log_prob(y)));
    }
    RewardVector::new(out)
}

fn pair_margins(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<MarginPair> {
    ex.validate()?;
    cfg.validate()?;
    let implicit = implicit_rewards(policy, reference, ex, cfg.beta)?;
    let a = implicit[ex.chosen_idx] - implicit[ex.rejected_idx];
    let b = cfg.margin_target.unwrap_or(MarginTarget::Finite(
        cfg.eta * (ex.gt_rewards[ex.chosen_idx] - ex.gt_rewards[ex.rejected_idx]),
    ));
    Ok(MarginPair { a, b })
}

fn require(metric: MetricKind, pair: bool) -> Result<()> {
    if metric.is_pair() == pair {
        return Ok(());
    }
    Err(Error::MetricKind {
        metric: metric.name(),
        reason: if pair {
            "pair loss needs a pair metric"
        } else {
            "multi-response loss needs a multi-response metric"
        },
    })
}

/// 𝔻[implicit margin ‖ η · explicit margin] on the chosen/rejected pair.
pub fn rpo_loss_pair(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<f64> {
    require(cfg.metric, true)?;
    distance_pair(cfg.metric, &pair_margins(policy, reference, ex, cfg)?)
}

/// 𝔻[β log(π/π_ref)(y^{1:K}) ‖ η r*(y^{1:K})].
pub fn rpo_loss_multi(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<f64> {
    require(cfg.metric, false)?;
    ex.validate()?;
    cfg.validate()?;
    let implicit = implicit_rewards(policy, reference, ex, cfg.beta)?;
    distance_multi(cfg.metric, &implicit, &ex.gt_rewards.scaled(cfg.eta)?)
}

/// Pair or multi-response loss, whichever the metric calls for.
pub fn rpo_loss(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<f64> {
    if cfg.metric.is_pair() {
        rpo_loss_pair(policy, reference, ex, cfg)
    } else {
        rpo_loss_multi(policy, reference, ex, cfg)
    }
}

/// Per-response scales `S_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreScales(pub Vec<f64>);

impl ScoreScales {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `S_k = ∂𝔻/∂a_k` at `a = implicit`, `b = η · explicit`.
pub fn online_score_scales(
    metric: MetricKind,
    implicit: &RewardVector,
    explicit: &RewardVector,
    eta: f64,
) -> Result<ScoreScales> {
    if !metric.is_shift_invariant() {
        return Err(Error::MetricKind {
            metric: metric.name(),
            reason: "score scales need sqloo, bwd-categorical or fwd-categorical",
        });
    }
    let grad = distance_multi_grad(metric, implicit, &explicit.scaled(eta)?)?;
    Ok(ScoreScales(grad.into_inner()))
}

/// Scales for the pair loss: `(𝔻'(a), −𝔻'(a))` on (chosen, rejected).
fn pair_scales(
    margins: &MarginPair,
    metric: MetricKind,
    ex: &PreferenceExample,
) -> Result<Vec<f64>> {
    let d = distance_pair_grad(metric, margins)?;
    let mut s = vec![0.0; ex.k()];
    s[ex.chosen_idx] += d;
    s[ex.rejected_idx] -= d;
    Ok(s)
}

/// `β Σ_k S_k ∇ log π(y_k|x)` assembled into a full-policy gradient.
pub fn assemble_grad(
    policy: &FactorizedPolicy,
    context: usize,
    responses: &[Response],
    scales: &[f64],
    beta: f64,
) -> Result<PolicyGrad> {
    let mut grad = PolicyGrad::zeros_like(policy);
    for (y, s) in responses.iter().zip(scales) {
        if *s == 0.0 {
            continue;
        }
        let g = policy.log_prob_grad(context, y)?;
        grad.add_to_context(context, &g, beta * s);
    }
    Ok(grad)
}

/// Gradient of [`rpo_loss`] with respect to the policy logits.
pub fn rpo_loss_grad(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<PolicyGrad> {
    let scales = if cfg.metric.is_pair() {
        let m = pair_margins(policy, reference, ex, cfg)?;
        pair_scales(&m, cfg.metric, ex)?
    } else {
        ex.validate()?;
        cfg.validate()?;
        let implicit = implicit_rewards(policy, reference, ex, cfg.beta)?;
        distance_multi_grad(cfg.metric, &implicit, &ex.gt_rewards.scaled(cfg.eta)?)?.into_inner()
    };
    assemble_grad(policy, ex.context, &ex.responses, &scales, cfg.beta)
}

/// Loss value and gradient in one pass.
pub fn rpo_loss_and_grad(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<(f64, PolicyGrad)> {
    let (loss, scales) = if cfg.metric.is_pair() {
        let m = pair_margins(policy, reference, ex, cfg)?;
        (
            distance_pair(cfg.metric, &m)?,
            pair_scales(&m, cfg.metric, ex)?,
        )
    } else {
        ex.validate()?;
        cfg.validate()?;
        let implicit = implicit_rewards(policy, reference, ex, cfg.beta)?;
        let target = ex.gt_rewards.scaled(cfg.eta)?;
        (
            distance_multi(cfg.metric, &implicit, &target)?,
            distance_multi_grad(cfg.metric, &implicit, &target)?.into_inner(),
        )
    };
    Ok((
        loss,
        assemble_grad(policy, ex.context, &ex.responses, &scales, cfg.beta)?,
    ))
}

/// RLOO scales computed from leave-one-out baselines of
/// `r_reinforce = β log(π/π_ref) − η r*`.
///
/// Written independently of the metric code; equals `(K−1)/K` times the
/// sqloo score scales.
#[allow(clippy::too_many_arguments)]
pub fn rloo_scales_reference(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    x: usize,
    responses: &[Response],
    explicit: &RewardVector,
    beta: f64,
    eta: f64,
) -> Result<ScoreScales> {
    let k = responses.len();
    if k < 2 {
        return Err(Error::TooFewResponses(k));
    }
    if explicit.len() != k {
        return Err(Error::LengthMismatch {
            left: k,
            right: explicit.len(),
        });
    }
    policy.same_shape(reference)?;
    let mut r_reinforce = Vec::with_capacity(k);
    for (y, r) in responses.iter().zip(explicit.as_slice()) {
        let log_ratio = policy.log_prob(x, y)? - reference.log_prob(x, y)?;
        r_reinforce.push(beta * log_ratio - eta * r);
    }
    let mut scales = Vec::with_capacity(k);
    for i in 0..k {
        let mut others = 0.0;
        for (j, r) in r_reinforce.iter().enumerate() {
            if j != i {
                others += r;
            }
        }
        scales.push(r_reinforce[i] - others / (k as f64 - 1.0));
    }
    Ok(ScoreScales(scales))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Dpo,
    Cdpo,
    Ipo,
    DistillDpo,
    Simpo,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Dpo,
        BaselineKind::Cdpo,
        BaselineKind::Ipo,
        BaselineKind::DistillDpo,
        BaselineKind::Simpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Dpo => "dpo",
            BaselineKind::Cdpo => "cdpo",
            BaselineKind::Ipo => "ipo",
            BaselineKind::DistillDpo => "distill_dpo",
            BaselineKind::Simpo => "simpo",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown baseline loss {s:?}")))
    }
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.5 && c <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "cDPO c must lie in (0.5, 1], got {c}"
        )));
    }
    Ok(())
}

/// `log π(y_c)/π_ref(y_c) − log π(y_r)/π_ref(y_r)` (no β).
fn log_ratio_margin(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
) -> Result<f64> {
    let lr = implicit_rewards(policy, reference, ex, 1.0)?;
    Ok(lr[ex.chosen_idx] - lr[ex.rejected_idx])
}

/// Loss value and `∂loss/∂(margin variable)` for the literal baseline formulas.
/// The margin variable is `δ_{r_π}` for all kinds except SimPO, where it is
/// the length-normalized log-probability margin.
fn baseline_scalar(
    kind: BaselineKind,
    delta: f64,
    cfg: &LossConfig,
    explicit: f64,
) -> Result<(f64, f64)> {
    let beta = cfg.beta;
    Ok(match kind {
        BaselineKind::Dpo => (-log_sigmoid(beta * delta), -beta * sigmoid(-beta * delta)),
        BaselineKind::Cdpo => {
            check_c(cfg.c)?;
            let c = cfg.c;
            let z = beta * delta;
            let loss = -(c * log_sigmoid(z) + (1.0 - c) * log_sigmoid(-z));
            // d/dz = −c σ(−z) + (1−c) σ(z) = σ(z) − c
            (loss, beta * (sigmoid(z) - c))
        }
        BaselineKind::Ipo => {
            let u = delta - 1.0 / (2.0 * beta);
            (u * u, 2.0 * u)
        }
        BaselineKind::DistillDpo => {
            let u = beta * delta - explicit;
            (u * u, 2.0 * beta * u)
        }
        BaselineKind::Simpo => {
            let u = delta - cfg.gamma;
            (-log_sigmoid(u), -sigmoid(-u))
        }
    })
}

/// Table-style baseline loss on the chosen/rejected pair. SimPO uses the
/// response lengths as `|y|`.
pub fn baseline_loss(
    kind: BaselineKind,
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(baseline_loss_and_grad(kind, policy, reference, ex, cfg)?.0)
}

pub fn baseline_loss_grad(
    kind: BaselineKind,
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<PolicyGrad> {
    Ok(baseline_loss_and_grad(kind, policy, reference, ex, cfg)?.1)
}

pub fn baseline_loss_and_grad(
    kind: BaselineKind,
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
) -> Result<(f64, PolicyGrad)> {
    if kind == BaselineKind::Simpo {
        let lc = ex.responses[ex.chosen_idx].len() as f64;
        let lr = ex.responses[ex.rejected_idx].len() as f64;
        return simpo_loss_and_grad(policy, ex, cfg, lc, lr);
    }
    ex.validate()?;
    cfg.validate()?;
    let delta = log_ratio_margin(policy, reference, ex)?;
    let explicit = cfg.eta * (ex.gt_rewards[ex.chosen_idx] - ex.gt_rewards[ex.rejected_idx]);
    let (loss, d) = baseline_scalar(kind, delta, cfg, explicit)?;
    let mut scales = vec![0.0; ex.k()];
    scales[ex.chosen_idx] += d;
    scales[ex.rejected_idx] -= d;
    let grad = assemble_grad(policy, ex.context, &ex.responses, &scales, 1.0)?;
    Ok((loss, grad))
}

/// SimPO with explicit response lengths.
pub fn simpo_loss_and_grad(
    policy: &FactorizedPolicy,
    ex: &PreferenceExample,
    cfg: &LossConfig,
    len_chosen: f64,
    len_rejected: f64,
) -> Result<(f64, PolicyGrad)> {
    ex.validate()?;
    cfg.validate()?;
    if !(len_chosen > 0.0 && len_rejected > 0.0) {
        return Err(Error::InvalidParameter(
            "SimPO lengths must be positive".into(),
        ));
    }
    let yc = &ex.responses[ex.chosen_idx];
    let yr = &ex.responses[ex.rejected_idx];
    let sc = cfg.beta / len_chosen;
    let sr = cfg.beta / len_rejected;
    let margin = sc * policy.log_prob(ex.context, yc)? - sr * policy.log_prob(ex.context, yr)?;
    let (loss, d) = baseline_scalar(BaselineKind::Simpo, margin, cfg, 0.0)?;
    let mut scales = vec![0.0; ex.k()];
    scales[ex.chosen_idx] += d * sc;
    scales[ex.rejected_idx] -= d * sr;
    let grad = assemble_grad(policy, ex.context, &ex.responses, &scales, 1.0)?;
    Ok((loss, grad))
}

/// Both sides of the Bernoulli-KL / BRAIn equivalence at `β = η = 1`.
///
/// `lhs` is the pair RPO loss with `bwd-bernoulli`; `rhs` is
/// `α̂ log(α̂/β̂) + (1−α̂) log((1−α̂)/(1−β̂))` with `α̂ = σ(r*_c − r*_r)` and
/// `β̂` the two-way normalized policy/reference ratio of the chosen response.
pub fn bernoulli_brain_equivalence(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
) -> Result<(f64, f64)> {
    let cfg = LossConfig::new(MetricKind::BwdBernoulli, 1.0, 1.0);
    let lhs = rpo_loss_pair(policy, reference, ex, &cfg)?;
    let (beta_hat, one_minus_beta_hat) = brain_beta_hat(policy, reference, ex)?;
    let gap = ex.gt_rewards[ex.chosen_idx] - ex.gt_rewards[ex.rejected_idx];
    let ea = gap.exp();
    let alpha = ea / (ea + 1.0);
    let alpha_c = 1.0 / (ea + 1.0);
    let mut rhs = 0.0;
    if alpha > 0.0 {
        rhs += alpha * (alpha / beta_hat).ln();
    }
    if alpha_c > 0.0 {
        rhs += alpha_c * (alpha_c / one_minus_beta_hat).ln();
    }
    Ok((lhs, rhs))
}

/// The DPO limit of [`bernoulli_brain_equivalence`]: the explicit margin is
/// `+∞`, so `α̂ = 1` and the right-hand side collapses to `−log β̂`.
pub fn bernoulli_brain_dpo_limit(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
) -> Result<(f64, f64)> {
    let cfg = LossConfig::new(MetricKind::BwdBernoulli, 1.0, 1.0)
        .with_margin_target(MarginTarget::PlusInfinity);
    let lhs = rpo_loss_pair(policy, reference, ex, &cfg)?;
    let (beta_hat, _) = brain_beta_hat(policy, reference, ex)?;
    Ok((lhs, -beta_hat.ln()))
}

/// `β̂_{y1} = w_c / (w_c + w_r)` with `w = π/π_ref`, and its complement,
/// computed in ratio form after dividing through by the larger weight.
fn brain_beta_hat(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    ex: &PreferenceExample,
) -> Result<(f64, f64)> {
    let (x, yc, yr) = (
        ex.context,
        &ex.responses[ex.chosen_idx],
        &ex.responses[ex.rejected_idx],
    );
    let lc = policy.log_prob(x, yc)? - reference.log_prob(x, yc)?;
    let lr = policy.log_prob(x, yr)? - reference.log_prob(x, yr)?;
    let top = lc.max(lr);
    let (wc, wr) = ((lc - top).exp(), (lr - top).exp());
    Ok((wc / (wc + wr), wr / (wc + wr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::softmax;
    use crate::policy::Vocab;

    fn setup() -> (FactorizedPolicy, FactorizedPolicy, PreferenceExample) {
        let vocab = Vocab::new(3, 2).unwrap();
        let policy = FactorizedPolicy::random(2, vocab, 1.0, 11);
        let reference = FactorizedPolicy::random(2, vocab, 1.0, 12);
        let responses = vec![
            Response(vec![0, 1]),
            Response(vec![2, 2]),
            Response(vec![1, 0]),
            Response(vec![0, 0]),
        ];
        let ex = PreferenceExample::new(
            7,
            1,
            responses,
            RewardVector::new(vec![1.5, -0.2, 0.4, 0.9]).unwrap(),
            0,
            2,
        )
        .unwrap();
        (policy, reference, ex)
    }

    #[test]
    fn example_validation() {
        let (_, _, ex) = setup();
        let mut bad = ex.clone();
        bad.rejected_idx = 0;
        assert!(bad.validate().is_err());
        let mut bad = ex.clone();
        bad.chosen_idx = 1;
        assert!(bad.validate().is_err());
        let mut bad = ex;
        bad.rejected_idx = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pair_loss_at_reference() {
        let (_, reference, mut ex) = setup();
        ex.gt_rewards = RewardVector::new(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let cfg = LossConfig::new(MetricKind::Sq, 0.5, 1.0);
        assert_eq!(
            rpo_loss_pair(&reference, &reference, &ex, &cfg).unwrap(),
            0.0
        );
        let cfg = LossConfig::new(MetricKind::BwdBernoulli, 0.5, 1.0)
            .with_margin_target(MarginTarget::PlusInfinity);
        let l = rpo_loss_pair(&reference, &reference, &ex, &cfg).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn metric_family_is_enforced() {
        let (p, r, ex) = setup();
        let cfg = LossConfig::new(MetricKind::Sqloo, 0.5, 1.0);
        assert!(rpo_loss_pair(&p, &r, &ex, &cfg).is_err());
        let cfg = LossConfig::new(MetricKind::Sq, 0.5, 1.0);
        assert!(rpo_loss_multi(&p, &r, &ex, &cfg).is_err());
    }

    #[test]
    fn multi_loss_at_reference_with_constant_rewards() {
        let (_, reference, mut ex) = setup();
        ex.gt_rewards = RewardVector::new(vec![2.0; 4]).unwrap();
        let cfg = LossConfig::new(MetricKind::Sqloo, 0.3, 1.0);
        assert_eq!(
            rpo_loss_multi(&reference, &reference, &ex, &cfg).unwrap(),
            0.0
        );
    }

    #[test]
    fn bwd_loss_ignores_reward_offset() {
        let (p, r, ex) = setup();
        let cfg = LossConfig::new(MetricKind::BwdCategorical, 0.3, 2.0);
        let base = rpo_loss_multi(&p, &r, &ex, &cfg).unwrap();
        let mut shifted = ex.clone();
        shifted.gt_rewards = ex.gt_rewards.shifted(17.0).unwrap();
        let moved = rpo_loss_multi(&p, &r, &shifted, &cfg).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn score_scale_examples() {
        let a = RewardVector::new(vec![0.2, -0.7, 1.1, 0.0]).unwrap();
        let s = online_score_scales(MetricKind::BwdCategorical, &a, &a, 1.0).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-15));
        let uniform = RewardVector::new(vec![3.0; 4]).unwrap();
        let s = online_score_scales(MetricKind::BwdCategorical, &a, &uniform, 5.0).unwrap();
        let q = softmax(&a);
        for k in 0..4 {
            assert!((s.as_slice()[k] - (q[k] - 0.25)).abs() < 1e-15);
        }
        let s = online_score_scales(
            MetricKind::Sqloo,
            &RewardVector::new(vec![0.5, -0.5]).unwrap(),
            &RewardVector::new(vec![1.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0]);
        assert!(online_score_scales(MetricKind::SqNaive, &a, &a, 1.0).is_err());
        let short = RewardVector::new(vec![0.0, 1.0]).unwrap();
        assert!(online_score_scales(MetricKind::Sqloo, &a, &short, 1.0).is_err());
    }

    #[test]
    fn rloo_reference_edge_cases() {
        let (p, _, ex) = setup();
        let s = rloo_scales_reference(
            &p,
            &p,
            ex.context,
            &ex.responses,
            &ex.gt_rewards,
            0.5,
            1e-300,
        )
        .unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-200));
        let constant = RewardVector::new(vec![0.3; 4]).unwrap();
        let s =
            rloo_scales_reference(&p, &p, ex.context, &ex.responses, &constant, 0.5, 1.0).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-15));
        assert!(rloo_scales_reference(&p, &p, 0, &ex.responses[..1], &constant, 0.5, 1.0).is_err());
    }

    #[test]
    fn baseline_examples() {
        let (_, reference, ex) = setup();
        let mut cfg = LossConfig::new(MetricKind::Sq, 0.4, 1.0);
        let dpo = baseline_loss(BaselineKind::Dpo, &reference, &reference, &ex, &cfg).unwrap();
        assert!((dpo - std::f64::consts::LN_2).abs() < 1e-15);
        cfg.c = 0.4;
        assert!(baseline_loss(BaselineKind::Cdpo, &reference, &reference, &ex, &cfg).is_err());
        cfg.c = 0.9;
        assert!(baseline_loss(BaselineKind::Cdpo, &reference, &reference, &ex, &cfg).is_ok());
    }

    #[test]
    fn ipo_and_distill_hit_zero_at_their_targets() {
        let vocab = Vocab::new(2, 1).unwrap();
        let reference = FactorizedPolicy::uniform(1, vocab);
        let beta = 0.25;
        // δ = log(p/(1−p)) for y_c = 0, y_r = 1 against a uniform reference
        let target = 1.0 / (2.0 * beta);
        let policy = FactorizedPolicy::from_logits(1, vocab, vec![target, 0.0]).unwrap();
        let ex = PreferenceExample::new(
            0,
            0,
            vec![Response(vec![0]), Response(vec![1])],
            RewardVector::new(vec![beta * target, 0.0]).unwrap(),
            0,
            1,
        )
        .unwrap();
        let cfg = LossConfig::new(MetricKind::Sq, beta, 1.0);
        let ipo = baseline_loss(BaselineKind::Ipo, &policy, &reference, &ex, &cfg).unwrap();
        assert!(ipo.abs() < 1e-24);
        let distill =
            baseline_loss(BaselineKind::DistillDpo, &policy, &reference, &ex, &cfg).unwrap();
        assert!(distill.abs() < 1e-24);
    }

    #[test]
    fn brain_equivalence_at_reference_with_tied_rewards() {
        let (_, reference, mut ex) = setup();
        ex.gt_rewards = RewardVector::new(vec![0.4, 0.0, 0.4, 0.0]).unwrap();
        let (lhs, rhs) = bernoulli_brain_equivalence(&reference, &reference, &ex).unwrap();
        assert!(lhs.abs() < 1e-15 && rhs.abs() < 1e-15);
        let (lhs, rhs) = bernoulli_brain_dpo_limit(&reference, &reference, &ex).unwrap();
        assert!((lhs - rhs).abs() < 1e-15);
        assert!((lhs - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_local_to_the_prompt_context() {
        let (p, r, ex) = setup();
        let cfg = LossConfig::new(MetricKind::BwdCategorical, 0.5, 2.0);
        let g = rpo_loss_grad(&p, &r, &ex, &cfg).unwrap();
        let mut p2 = p.clone();
        p2.context_logits_mut(0)
            .unwrap()
            .iter_mut()
            .for_each(|l| *l *= 3.0);
        let g2 = rpo_loss_grad(&p2, &r, &ex, &cfg).unwrap();
        assert_eq!(g, g2);
        assert!(g.context_block(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_gradient_when_softmaxes_match() {
        let (_, reference, mut ex) = setup();
        ex.gt_rewards = RewardVector::new(vec![0.0; 4]).unwrap();
        let cfg = LossConfig::new(MetricKind::BwdCategorical, 0.5, 2.0);
        let g = rpo_loss_grad(&reference, &reference, &ex, &cfg).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }
}
