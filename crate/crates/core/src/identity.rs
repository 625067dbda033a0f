//! Randomized checks of every recovery, equivalence and gradient identity
//! the objectives satisfy. Each check reports the largest deviation it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::pick_pair;
use crate::env::derive_seed;
use crate::error::Result;
use crate::metrics::{distance_multi, logit, MarginTarget, MetricKind, RewardVector};
use crate::objectives::{
    assemble_grad, baseline_loss, baseline_loss_and_grad, bernoulli_brain_equivalence,
    implicit_rewards, online_score_scales, rloo_scales_reference, rpo_loss, rpo_loss_and_grad,
    BaselineKind, LossConfig, PreferenceExample,
};
use crate::policy::{FactorizedPolicy, PolicyGrad, Response, Vocab};

/// Deliberate mutations used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Center sqloo rewards on the full mean instead of leaving one out.
    SqlooCentering,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqloo-centering" => Ok(Fault::SqlooCentering),
            other => Err(crate::Error::InvalidParameter(format!(
                "unknown fault {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub recovery: f64,
    pub rloo: f64,
    pub brain: f64,
    pub shift: f64,
    /// Minimum violation the sq-naive witness must show.
    pub naive_witness: f64,
    pub fd_step: f64,
    pub fd_relative: f64,
    pub scale_consistency: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            recovery: 1e-9,
            rloo: 1e-12,
            brain: 1e-10,
            shift: 1e-9,
            naive_witness: 1e-3,
            fd_step: 1e-5,
            fd_relative: 1e-5,
            scale_consistency: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityResult {
    pub name: String,
    pub trials: usize,
    /// Largest deviation observed (for witnesses, the violation size).
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Witness checks pass when the deviation *exceeds* the tolerance.
    pub witness: bool,
    pub passed: bool,
}

impl IdentityResult {
    fn new(name: &str, trials: usize, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            trials,
            max_deviation,
            tolerance,
            witness: false,
            passed: max_deviation <= tolerance,
        }
    }

    fn witness(name: &str, trials: usize, violation: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            trials,
            max_deviation: violation,
            tolerance: threshold,
            witness: true,
            passed: violation > threshold,
        }
    }
}

/// One random policy/reference pair with a K-response example on it.
pub struct Instance {
    pub policy: FactorizedPolicy,
    pub reference: FactorizedPolicy,
    pub example: PreferenceExample,
    pub beta: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_policy(
    contexts: usize,
    vocab: Vocab,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> FactorizedPolicy {
    let n = contexts * vocab.max_len * vocab.size;
    let logits = (0..n).map(|_| scale * normal(rng)).collect();
    FactorizedPolicy::from_logits(contexts, vocab, logits).expect("finite logits")
}

fn random_response(vocab: Vocab, len: usize, rng: &mut ChaCha8Rng) -> Response {
    Response(
        (0..len)
            .map(|_| rng.random_range(0..vocab.size as u32))
            .collect(),
    )
}

/// Log-uniform draw on `[lo, hi]`.
fn log_uniform(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Draws an instance with K responses; `beta_range` is sampled log-uniformly.
pub fn random_instance(rng: &mut ChaCha8Rng, k: usize, beta_range: (f64, f64)) -> Instance {
    let vocab = Vocab::new(rng.random_range(2..=5), rng.random_range(1..=4)).expect("small vocab");
    let contexts = rng.random_range(1..=3);
    let policy = random_policy(contexts, vocab, rng.random_range(0.1..2.0), rng);
    let reference = random_policy(contexts, vocab, rng.random_range(0.1..2.0), rng);
    let context = rng.random_range(0..contexts);
    let responses: Vec<Response> = (0..k)
        .map(|_| random_response(vocab, vocab.max_len, rng))
        .collect();
    let rewards: Vec<f64> = (0..k).map(|_| 2.0 * normal(rng)).collect();
    let (chosen, rejected) = pick_pair(&rewards, rng);
    let example = PreferenceExample::new(
        0,
        context,
        responses,
        RewardVector::new(rewards).expect("finite rewards"),
        chosen,
        rejected,
    )
    .expect("valid example");
    Instance {
        policy,
        reference,
        example,
        beta: log_uniform(beta_range.0, beta_range.1, rng),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn grad_dev(a: &PolicyGrad, b: &PolicyGrad, scale_b: f64) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| rel(*x, scale_b * y))
        .fold(0.0, f64::max)
}

struct Suite {
    trials: usize,
    seed: u64,
    tol: Tolerances,
    fault: Option<Fault>,
}

impl Suite {
    fn rng(&self, check: u64, trial: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.seed, check), trial as u64))
    }

    fn pair_instance(&self, check: u64, trial: usize) -> Instance {
        random_instance(&mut self.rng(check, trial), 2, (0.01, 10.0))
    }

    fn dpo(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(1, t);
            let cfg = LossConfig::new(MetricKind::BwdBernoulli, inst.beta, 1.0)
                .with_margin_target(MarginTarget::PlusInfinity);
            let rpo = rpo_loss(&inst.policy, &inst.reference, &inst.example, &cfg)?;
            let dpo = baseline_loss(
                BaselineKind::Dpo,
                &inst.policy,
                &inst.reference,
                &inst.example,
                &cfg,
            )?;
            worst = worst.max(rel(rpo, dpo));
        }
        Ok(IdentityResult::new(
            "dpo-recovery",
            self.trials,
            worst,
            self.tol.recovery,
        ))
    }

    fn cdpo(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(2, t);
            let c = 0.5 + 0.5 * self.rng(102, t).random_range(0.02..1.0);
            let mut cfg = LossConfig::new(MetricKind::BwdBernoulli, inst.beta, 1.0);
            cfg.c = c;
            let cfg = cfg.with_margin_target(MarginTarget::Finite(logit(c)));
            let (rl, rg) = rpo_loss_and_grad(&inst.policy, &inst.reference, &inst.example, &cfg)?;
            let (bl, bg) = baseline_loss_and_grad(
                BaselineKind::Cdpo,
                &inst.policy,
                &inst.reference,
                &inst.example,
                &cfg,
            )?;
            // the losses differ by the entropy of Ber(c)
            let entropy = -(c * c.ln() + (1.0 - c) * (1.0 - c).ln());
            worst = worst
                .max(grad_dev(&rg, &bg, 1.0))
                .max(rel(rl + entropy, bl));
        }
        Ok(IdentityResult::new(
            "cdpo-recovery",
            self.trials,
            worst,
            self.tol.recovery,
        ))
    }

    fn ipo(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(3, t);
            let cfg = LossConfig::new(MetricKind::Sq, inst.beta, 1.0)
                .with_margin_target(MarginTarget::Finite(0.5));
            let rpo = rpo_loss(&inst.policy, &inst.reference, &inst.example, &cfg)?;
            let ipo = baseline_loss(
                BaselineKind::Ipo,
                &inst.policy,
                &inst.reference,
                &inst.example,
                &cfg,
            )?;
            worst = worst.max(rel(2.0 / (inst.beta * inst.beta) * rpo, ipo));
        }
        Ok(IdentityResult::new(
            "ipo-recovery",
            self.trials,
            worst,
            self.tol.recovery,
        ))
    }

    fn distill(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(4, t);
            let eta = log_uniform(0.1, 10.0, &mut self.rng(104, t));
            let cfg = LossConfig::new(MetricKind::Sq, inst.beta, eta);
            let (rl, rg) = rpo_loss_and_grad(&inst.policy, &inst.reference, &inst.example, &cfg)?;
            let (bl, bg) = baseline_loss_and_grad(
                BaselineKind::DistillDpo,
                &inst.policy,
                &inst.reference,
                &inst.example,
                &cfg,
            )?;
            worst = worst.max(grad_dev(&bg, &rg, 2.0)).max(rel(bl, 2.0 * rl));
        }
        Ok(IdentityResult::new(
            "distill-dpo-recovery",
            self.trials,
            worst,
            self.tol.recovery,
        ))
    }

    fn simpo(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(5, t);
            let vocab = inst.policy.vocab();
            let uniform = FactorizedPolicy::uniform(inst.policy.contexts(), vocab);
            let len = vocab.max_len as f64;
            let mut simpo_cfg = LossConfig::new(MetricKind::BwdBernoulli, inst.beta, 1.0);
            simpo_cfg.gamma = 0.0;
            let dpo_cfg = LossConfig::new(MetricKind::BwdBernoulli, inst.beta / len, 1.0);
            let s = baseline_loss(
                BaselineKind::Simpo,
                &inst.policy,
                &uniform,
                &inst.example,
                &simpo_cfg,
            )?;
            let d = baseline_loss(
                BaselineKind::Dpo,
                &inst.policy,
                &uniform,
                &inst.example,
                &dpo_cfg,
            )?;
            worst = worst.max(rel(s, d));
        }
        Ok(IdentityResult::new(
            "simpo-dpo-correspondence",
            self.trials,
            worst,
            self.tol.recovery,
        ))
    }

    fn rloo(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for (i, &k) in [2usize, 3, 4, 8].iter().enumerate() {
            for t in 0..self.trials {
                let inst = random_instance(&mut self.rng(6 + 100 * i as u64, t), k, (0.01, 10.0));
                let ex = &inst.example;
                let implicit = implicit_rewards(&inst.policy, &inst.reference, ex, inst.beta)?;
                let scales = match self.fault {
                    Some(Fault::SqlooCentering) => {
                        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                        let (ma, mb) = (mean(implicit.as_slice()), mean(ex.gt_rewards.as_slice()));
                        implicit
                            .as_slice()
                            .iter()
                            .zip(ex.gt_rewards.as_slice())
                            .map(|(a, b)| (a - ma) - (b - mb))
                            .collect::<Vec<_>>()
                    }
                    None => {
                        online_score_scales(MetricKind::Sqloo, &implicit, &ex.gt_rewards, 1.0)?.0
                    }
                };
                let reference = rloo_scales_reference(
                    &inst.policy,
                    &inst.reference,
                    ex.context,
                    &ex.responses,
                    &ex.gt_rewards,
                    inst.beta,
                    1.0,
                )?;
                let factor = (k as f64 - 1.0) / k as f64;
                for (s, r) in scales.iter().zip(reference.as_slice()) {
                    worst = worst.max((factor * s - r).abs());
                }
            }
        }
        Ok(IdentityResult::new(
            "rloo-equivalence",
            4 * self.trials,
            worst,
            self.tol.rloo,
        ))
    }

    fn brain(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for t in 0..self.trials {
            let inst = self.pair_instance(7, t);
            let (lhs, rhs) =
                bernoulli_brain_equivalence(&inst.policy, &inst.reference, &inst.example)?;
            worst = worst.max(rel(lhs, rhs));
        }
        Ok(IdentityResult::new(
            "brain-equivalence",
            self.trials,
            worst,
            self.tol.brain,
        ))
    }

    fn shift(&self) -> Result<Vec<IdentityResult>> {
        let mut out = Vec::new();
        for (i, metric) in [
            MetricKind::Sqloo,
            MetricKind::BwdCategorical,
            MetricKind::FwdCategorical,
        ]
        .into_iter()
        .enumerate()
        {
            let mut worst: f64 = 0.0;
            for t in 0..self.trials {
                let mut rng = self.rng(8 + 100 * i as u64, t);
                let k = rng.random_range(2..=8);
                let a: Vec<f64> = (0..k).map(|_| 3.0 * normal(&mut rng)).collect();
                let b: Vec<f64> = (0..k).map(|_| 3.0 * normal(&mut rng)).collect();
                let c = 10.0 * normal(&mut rng);
                let (av, bv) = (RewardVector::new(a)?, RewardVector::new(b)?);
                let base = distance_multi(metric, &av, &bv)?;
                let shifted = distance_multi(metric, &av.shifted(c)?, &bv)?;
                worst = worst.max(rel(base, shifted));
            }
            out.push(IdentityResult::new(
                &format!("shift-invariance-{}", metric.name()),
                self.trials,
                worst,
                self.tol.shift,
            ));
        }
        // constructed witness: equal vectors are at distance zero, one shift away they are not
        let a = RewardVector::new(vec![0.3, -1.2, 2.0, 0.5])?;
        let violation = distance_multi(MetricKind::SqNaive, &a.shifted(1.0)?, &a)?
            - distance_multi(MetricKind::SqNaive, &a, &a)?;
        out.push(IdentityResult::witness(
            "shift-violation-sq-naive",
            1,
            violation.abs(),
            self.tol.naive_witness,
        ));
        Ok(out)
    }

    fn scale_consistency(&self) -> Result<IdentityResult> {
        let mut worst: f64 = 0.0;
        for (i, metric) in [
            MetricKind::Sqloo,
            MetricKind::BwdCategorical,
            MetricKind::FwdCategorical,
        ]
        .into_iter()
        .enumerate()
        {
            for t in 0..self.trials {
                let mut rng = self.rng(9 + 100 * i as u64, t);
                let k = rng.random_range(2..=6);
                let inst = random_instance(&mut rng, k, (0.1, 5.0));
                let eta = log_uniform(0.1, 10.0, &mut rng);
                let ex = &inst.example;
                let cfg = LossConfig::new(metric, inst.beta, eta);
                let (_, grad) = rpo_loss_and_grad(&inst.policy, &inst.reference, ex, &cfg)?;
                let implicit = implicit_rewards(&inst.policy, &inst.reference, ex, inst.beta)?;
                let scales = online_score_scales(metric, &implicit, &ex.gt_rewards, eta)?;
                let rebuilt = assemble_grad(
                    &inst.policy,
                    ex.context,
                    &ex.responses,
                    scales.as_slice(),
                    inst.beta,
                )?;
                worst = worst.max(grad_dev(&grad, &rebuilt, 1.0));
            }
        }
        Ok(IdentityResult::new(
            "gradient-scale-consistency",
            3 * self.trials,
            worst,
            self.tol.scale_consistency,
        ))
    }

    fn finite_differences(&self, trials: usize) -> Result<Vec<IdentityResult>> {
        let mut cases: Vec<(String, LossSpec)> = Vec::new();
        for m in MetricKind::PAIR {
            cases.push((format!("fd-rpo-{}", m.name()), LossSpec::Rpo(m, false)));
        }
        cases.push((
            "fd-rpo-bwd-bernoulli-dpo-limit".into(),
            LossSpec::Rpo(MetricKind::BwdBernoulli, true),
        ));
        for m in MetricKind::MULTI {
            cases.push((format!("fd-rpo-{}", m.name()), LossSpec::Rpo(m, false)));
        }
        for b in BaselineKind::ALL {
            cases.push((format!("fd-{}", b.name().replace('_', "-")), LossSpec::Baseline(b)));
        }
        let mut out = Vec::new();
        for (i, (name, spec)) in cases.into_iter().enumerate() {
            let mut worst: f64 = 0.0;
            for t in 0..trials {
                let mut rng = self.rng(10 + 100 * i as u64, t);
                let k = if spec.is_pair() {
                    2
                } else {
                    rng.random_range(2..=6)
                };
                let inst = random_instance(&mut rng, k, (0.1, 3.0));
                let mut cfg =
                    LossConfig::new(spec.metric(), inst.beta, log_uniform(0.2, 5.0, &mut rng));
                cfg.c = rng.random_range(0.55..1.0);
                cfg.gamma = rng.random_range(0.0..1.0);
                if let LossSpec::Rpo(_, true) = spec {
                    cfg = cfg.with_margin_target(MarginTarget::PlusInfinity);
                }
                worst = worst.max(fd_error(&inst, &cfg, spec, self.tol.fd_step)?);
            }
            out.push(IdentityResult::new(
                &name,
                trials,
                worst,
                self.tol.fd_relative,
            ));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum LossSpec {
    /// Metric, and whether the explicit margin is `+∞`.
    Rpo(MetricKind, bool),
    Baseline(BaselineKind),
}

impl LossSpec {
    fn is_pair(self) -> bool {
        match self {
            LossSpec::Rpo(m, _) => m.is_pair(),
            LossSpec::Baseline(_) => true,
        }
    }

    fn metric(self) -> MetricKind {
        match self {
            LossSpec::Rpo(m, _) => m,
            LossSpec::Baseline(_) => MetricKind::BwdBernoulli,
        }
    }

    fn eval(
        self,
        policy: &FactorizedPolicy,
        inst: &Instance,
        cfg: &LossConfig,
    ) -> Result<(f64, PolicyGrad)> {
        match self {
            LossSpec::Rpo(..) => rpo_loss_and_grad(policy, &inst.reference, &inst.example, cfg),
            LossSpec::Baseline(b) => {
                baseline_loss_and_grad(b, policy, &inst.reference, &inst.example, cfg)
            }
        }
    }
}

/// Gradient norms below this are compared absolutely: central differences
/// carry a rounding floor of roughly `ε·|loss|/h`, which swamps a vanishing
/// analytic gradient.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, FD_SCALE_FLOOR)` with central differences
/// over every logit.
fn fd_error(inst: &Instance, cfg: &LossConfig, spec: LossSpec, h: f64) -> Result<f64> {
    let (_, grad) = spec.eval(&inst.policy, inst, cfg)?;
    let mut probe = inst.policy.clone();
    let mut fd = vec![0.0; grad.values().len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let orig = probe.logits()[i];
        probe.logits_mut()[i] = orig + h;
        let up = spec.eval(&probe, inst, cfg)?.0;
        probe.logits_mut()[i] = orig - h;
        let down = spec.eval(&probe, inst, cfg)?.0;
        probe.logits_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = grad.values().iter().zip(&fd).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / norm(grad.values()).max(norm(&fd)).max(FD_SCALE_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityOptions {
    pub trials: usize,
    /// Finite-difference trials per loss; defaults to `min(trials, 100)`.
    pub fd_trials: Option<usize>,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub fault: Option<Fault>,
}

impl IdentityOptions {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            fd_trials: None,
            seed,
            tolerances: Tolerances::default(),
            fault: None,
        }
    }
}

/// Runs the whole suite.
pub fn run_identity_checks(opts: &IdentityOptions) -> Result<Vec<IdentityResult>> {
    if opts.trials == 0 {
        return Err(crate::Error::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let s = Suite {
        trials: opts.trials,
        seed: opts.seed,
        tol: opts.tolerances,
        fault: opts.fault,
    };
    let mut out = vec![
        s.dpo()?,
        s.cdpo()?,
        s.ipo()?,
        s.distill()?,
        s.simpo()?,
        s.rloo()?,
        s.brain()?,
    ];
    out.extend(s.shift()?);
    out.push(s.scale_consistency()?);
    out.extend(s.finite_differences(opts.fd_trials.unwrap_or(opts.trials.min(100)))?);
    Ok(out)
}

/// Plain-text table, one identity per line.
pub fn format_table(results: &[IdentityResult]) -> String {
    let mut s = format!(
        "{:<36} {:>7} {:>12} {:>10}  status\n",
        "identity", "trials", "max_dev", "tol"
    );
    for r in results {
        let cmp = if r.witness { ">" } else { "<=" };
        s.push_str(&format!(
            "{:<36} {:>7} {:>12.3e} {:>2}{:>8.0e}  {}\n",
            r.name,
            r.trials,
            r.max_deviation,
            cmp,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
