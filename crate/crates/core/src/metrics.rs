//! Distance metrics between implicit and explicit rewards.
//!
//! Pair metrics act on reward margins (`a` = implicit margin, `b` = scaled
//! explicit margin). Multi-response metrics act on whole reward vectors
//! `a_{1:K}` and `b_{1:K}`. Every function here is pure and works in `f64`.
//!
//! | kind | value |
//! |------|-------|
//! | `sq` | ½(a − b)² |
//! | `bwd-bernoulli` | KL[p_b ‖ p_a], p_x(1) = σ(x) |
//! | `sq-naive` | ½ Σ (a_k − b_k)² |
//! | `sqloo` | ½ Σ (â_k − b̂_k)², â_k = a_k − mean_{j≠k} a_j |
//! | `bwd-categorical` | Σ q^b_i (log q^b_i − log q^a_i) |
//! | `fwd-categorical` | Σ q^a_i (log q^a_i − log q^b_i) |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rewards (implicit or explicit) for the K responses of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewResponses(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward vector"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v + c).collect())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * s).collect())
    }
}

impl TryFrom<Vec<f64>> for RewardVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<RewardVector> for Vec<f64> {
    fn from(v: RewardVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for RewardVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Explicit-reward side of a pair margin. `PlusInfinity` is the DPO limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginTarget {
    Finite(f64),
    PlusInfinity,
}

/// Implicit margin `a` against the (scaled) explicit margin `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPair {
    pub a: f64,
    pub b: MarginTarget,
}

impl MarginPair {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b: MarginTarget::Finite(b),
        }
    }

    pub fn dpo_limit(a: f64) -> Self {
        Self {
            a,
            b: MarginTarget::PlusInfinity,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.a.is_finite() {
            return Err(Error::NonFinite("implicit margin"));
        }
        if let MarginTarget::Finite(b) = self.b {
            if !b.is_finite() {
                return Err(Error::NonFinite("explicit margin"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "sq")]
    Sq,
    #[serde(rename = "bwd-bernoulli")]
    BwdBernoulli,
    #[serde(rename = "sq-naive")]
    SqNaive,
    #[serde(rename = "sqloo")]
    Sqloo,
    #[serde(rename = "bwd-categorical")]
    BwdCategorical,
    #[serde(rename = "fwd-categorical")]
    FwdCategorical,
}

impl MetricKind {
    pub const PAIR: [MetricKind; 2] = [MetricKind::Sq, MetricKind::BwdBernoulli];
    pub const MULTI: [MetricKind; 4] = [
        MetricKind::SqNaive,
        MetricKind::Sqloo,
        MetricKind::BwdCategorical,
        MetricKind::FwdCategorical,
    ];

    pub fn is_pair(self) -> bool {
        matches!(self, MetricKind::Sq | MetricKind::BwdBernoulli)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sq => "sq",
            MetricKind::BwdBernoulli => "bwd-bernoulli",
            MetricKind::SqNaive => "sq-naive",
            MetricKind::Sqloo => "sqloo",
            MetricKind::BwdCategorical => "bwd-categorical",
            MetricKind::FwdCategorical => "fwd-categorical",
        }
    }

    /// Whether adding a constant to every entry of either argument leaves
    /// the distance unchanged.
    pub fn is_shift_invariant(self) -> bool {
        matches!(
            self,
            MetricKind::Sqloo | MetricKind::BwdCategorical | MetricKind::FwdCategorical
        )
    }

    fn require_pair(self) -> Result<()> {
        if self.is_pair() {
            Ok(())
        } else {
            Err(Error::MetricKind {
                metric: self.name(),
                reason: "pair operation needs sq or bwd-bernoulli",
            })
        }
    }

    fn require_multi(self) -> Result<()> {
        if self.is_pair() {
            Err(Error::MetricKind {
                metric: self.name(),
                reason: "multi-response operation needs sq-naive, sqloo, bwd-categorical or fwd-categorical",
            })
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sq" => MetricKind::Sq,
            "bwd-bernoulli" => MetricKind::BwdBernoulli,
            "sq-naive" => MetricKind::SqNaive,
            "sqloo" => MetricKind::Sqloo,
            "bwd-categorical" | "bwd" => MetricKind::BwdCategorical,
            "fwd-categorical" | "fwd" => MetricKind::FwdCategorical,
            other => return Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        })
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_slice(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &RewardVector) -> RewardVector {
    RewardVector(softmax_slice(logits.as_slice()))
}

/// Leave-one-out centering: `x_k − mean_{j≠k} x_j`.
pub(crate) fn loo_center(xs: &[f64]) -> Vec<f64> {
    let k = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    xs.iter().map(|x| x - (total - x) / (k - 1.0)).collect()
}

/// Pair distance 𝔻[a ‖ b].
pub fn distance_pair(kind: MetricKind, m: &MarginPair) -> Result<f64> {
    kind.require_pair()?;
    m.validate()?;
    Ok(match (kind, m.b) {
        (MetricKind::Sq, MarginTarget::Finite(b)) => 0.5 * (m.a - b).powi(2),
        (MetricKind::Sq, MarginTarget::PlusInfinity) => return Err(sq_infinite()),
        (MetricKind::BwdBernoulli, MarginTarget::Finite(b)) => bernoulli_kl(b, m.a),
        (MetricKind::BwdBernoulli, MarginTarget::PlusInfinity) => -log_sigmoid(m.a),
        _ => unreachable!("pair kind checked above"),
    })
}

/// ∂𝔻/∂a for a pair distance.
pub fn distance_pair_grad(kind: MetricKind, m: &MarginPair) -> Result<f64> {
    kind.require_pair()?;
    m.validate()?;
    Ok(match (kind, m.b) {
        (MetricKind::Sq, MarginTarget::Finite(b)) => m.a - b,
        (MetricKind::Sq, MarginTarget::PlusInfinity) => return Err(sq_infinite()),
        (MetricKind::BwdBernoulli, MarginTarget::Finite(b)) => sigmoid(m.a) - sigmoid(b),
        (MetricKind::BwdBernoulli, MarginTarget::PlusInfinity) => sigmoid(m.a) - 1.0,
        _ => unreachable!("pair kind checked above"),
    })
}

fn sq_infinite() -> Error {
    Error::InvalidParameter("squared distance to an infinite margin is unbounded".into())
}

/// KL[Ber(σ(target)) ‖ Ber(σ(model))], clamped at zero against rounding.
fn bernoulli_kl(target: f64, model: f64) -> f64 {
    let p = sigmoid(target);
    let q = 1.0 - p;
    let kl = p * (log_sigmoid(target) - log_sigmoid(model))
        + q * (log_sigmoid(-target) - log_sigmoid(-model));
    kl.max(0.0)
}

fn check_multi(kind: MetricKind, a: &RewardVector, b: &RewardVector) -> Result<()> {
    kind.require_multi()?;
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Multi-response distance 𝔻[a_{1:K} ‖ b_{1:K}].
pub fn distance_multi(kind: MetricKind, a: &RewardVector, b: &RewardVector) -> Result<f64> {
    check_multi(kind, a, b)?;
    let (a, b) = (a.as_slice(), b.as_slice());
    let value = match kind {
        MetricKind::SqNaive => 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>(),
        MetricKind::Sqloo => {
            let (ah, bh) = (loo_center(a), loo_center(b));
            0.5 * ah
                .iter()
                .zip(&bh)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
        }
        MetricKind::BwdCategorical => categorical_kl(b, a),
        MetricKind::FwdCategorical => categorical_kl(a, b),
        MetricKind::Sq | MetricKind::BwdBernoulli => unreachable!("multi kind checked above"),
    };
    Ok(value)
}

/// KL[softmax(p_logits) ‖ softmax(q_logits)].
fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax_slice(p_logits);
    let lq = log_softmax_slice(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(lpi, lqi)| lpi.exp() * (lpi - lqi))
        .sum();
    kl.max(0.0)
}

/// ∂𝔻/∂a_k for every k.
pub fn distance_multi_grad(
    kind: MetricKind,
    a: &RewardVector,
    b: &RewardVector,
) -> Result<RewardVector> {
    check_multi(kind, a, b)?;
    let (a, b) = (a.as_slice(), b.as_slice());
    let grad = match kind {
        MetricKind::SqNaive => a.iter().zip(b).map(|(x, y)| x - y).collect(),
        MetricKind::Sqloo => {
            let k = a.len() as f64;
            let (ah, bh) = (loo_center(a), loo_center(b));
            ah.iter()
                .zip(&bh)
                .map(|(x, y)| k / (k - 1.0) * (x - y))
                .collect()
        }
        MetricKind::BwdCategorical => {
            let (qa, qb) = (softmax_slice(a), softmax_slice(b));
            qa.iter().zip(&qb).map(|(x, y)| x - y).collect()
        }
        MetricKind::FwdCategorical => {
            // p_k (ℓ_k − Σ_i p_i ℓ_i), ℓ = log p − log q^b
            let la = log_softmax_slice(a);
            let lb = log_softmax_slice(b);
            let p: Vec<f64> = la.iter().map(|x| x.exp()).collect();
            let ell: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
            let mean: f64 = p.iter().zip(&ell).map(|(pi, li)| pi * li).sum();
            p.iter()
                .zip(&ell)
                .map(|(pi, li)| pi * (li - mean))
                .collect()
        }
        MetricKind::Sq | MetricKind::BwdBernoulli => unreachable!("multi kind checked above"),
    };
    Ok(RewardVector(grad))
}
