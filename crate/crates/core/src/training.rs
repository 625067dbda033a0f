//! Offline, online and iterative trainers, the optimizer, checkpoints and
//! the run log.
//!
//! Every trainer starts from its reference policy and keeps that reference
//! frozen for the whole call. Validation statistics are computed with the
//! exact expected reward, and the returned policy is the logged checkpoint
//! with the best validation reward (earliest on ties).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_preference_dataset, pick_pair, PreferenceDataset};
use crate::env::{derive_seed, Prompt};
use crate::error::{Error, Result};
use crate::eval::expected_reward;
use crate::judge::JudgeModel;
use crate::metrics::{MetricKind, RewardVector};
use crate::objectives::{
    baseline_loss_and_grad, rpo_loss_and_grad, BaselineKind, LossConfig, PreferenceExample,
};
use crate::policy::{FactorizedPolicy, PolicyGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Offline,
    Online,
}

/// Which loss the trainer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The RPO loss with `loss.metric`.
    Rpo,
    Dpo,
    Cdpo,
    Ipo,
    DistillDpo,
    Simpo,
}

impl Objective {
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Objective::Rpo => None,
            Objective::Dpo => Some(BaselineKind::Dpo),
            Objective::Cdpo => Some(BaselineKind::Cdpo),
            Objective::Ipo => Some(BaselineKind::Ipo),
            Objective::DistillDpo => Some(BaselineKind::DistillDpo),
            Objective::Simpo => Some(BaselineKind::Simpo),
        }
    }

    /// Whether the loss only looks at the chosen/rejected pair.
    pub fn is_pair(self, metric: MetricKind) -> bool {
        self.baseline().is_some() || metric.is_pair()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `θ ← θ − lr·g`.
    Plain,
    /// Adaptive moments with bias correction.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Gradient steps per iteration.
    pub steps: usize,
    pub batch_size: usize,
    /// Responses per prompt.
    pub k: usize,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    pub loss: LossConfig,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Validation, logging and checkpointing period in steps.
    pub checkpoint_every: usize,
    /// Optional global-norm gradient clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Test hook: poison the gradient at this global step.
    #[serde(default)]
    pub inject_nonfinite_at_step: Option<usize>,
}

fn default_iterations() -> usize {
    1
}
fn default_objective() -> Objective {
    Objective::Rpo
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Plain
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainerConfig {
    /// Toy defaults for the given mode and loss.
    pub fn new(mode: TrainMode, k: usize, loss: LossConfig, seed: u64) -> Self {
        Self {
            mode,
            iterations: 1,
            steps: 500,
            batch_size: 32,
            k,
            objective: Objective::Rpo,
            loss,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Plain,
            seed,
            checkpoint_every: 25,
            clip_norm: None,
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
            inject_nonfinite_at_step: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if self.k < 2 {
            return Err(Error::TooFewResponses(self.k));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("adam moments need beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.objective.is_pair(self.loss.metric) && self.k != 2 {
            return Err(Error::MetricKind {
                metric: self.loss.metric.name(),
                reason: "pair objectives require K = 2",
            });
        }
        if self.objective == Objective::Rpo
            && self.mode == TrainMode::Online
            && !self.loss.metric.is_pair()
            && !self.loss.metric.is_shift_invariant()
        {
            return Err(Error::MetricKind {
                metric: self.loss.metric.name(),
                reason: "online training needs a shift-invariant multi-response metric",
            });
        }
        Ok(())
    }
}

/// Optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One descent step in place.
pub fn optimizer_step(
    policy: &mut FactorizedPolicy,
    grad: &PolicyGrad,
    state: &mut OptimizerState,
    cfg: &TrainerConfig,
) -> Result<()> {
    grad.check_shape(policy)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let n = policy.logits().len();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match policy".into(),
        ));
    }
    let lr = cfg.learning_rate;
    let theta = policy.logits_mut();
    match cfg.optimizer {
        OptimizerKind::Plain => {
            for (p, g) in theta.iter_mut().zip(grad.values()) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            state.t += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            for i in 0..n {
                let g = grad.values()[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: FactorizedPolicy,
    /// Global step (gradient steps taken since the first iteration began).
    pub step: usize,
    pub iteration: usize,
    pub valid_reward: f64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        FactorizedPolicy::from_logits(
            ck.policy.contexts(),
            ck.policy.vocab(),
            ck.policy.logits().to_vec(),
        )?;
        Ok(ck)
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub iteration: usize,
    /// Mean minibatch loss since the previous record; absent before training.
    pub loss: Option<f64>,
    /// Validation reward under the judge the run optimizes.
    pub valid_reward: f64,
    /// Mean exact `KL(π‖π_ref)` over validation prompts.
    pub kl: f64,
    /// Validation reward under the learnt RM, when training against one.
    pub learnt_reward: Option<f64>,
    /// Validation reward under the ground-truth judge.
    pub gt_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Online groups whose K samples were all identical (zero scales).
    #[serde(default)]
    pub degenerate_groups: usize,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "step,loss,gt_reward,learnt_reward,kl")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                opt(r.loss),
                r.gt_reward,
                opt(r.learnt_reward),
                r.kl
            )?;
        }
        Ok(())
    }

    fn append(&mut self, other: RunLog) {
        self.records.extend(other.records);
        self.degenerate_groups += other.degenerate_groups;
    }
}

/// Argmax validation reward; the earliest step wins ties.
pub fn select_best_checkpoint(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for ck in checkpoints {
        match best {
            Some(b) if ck.valid_reward < b.valid_reward => {}
            Some(b) if ck.valid_reward == b.valid_reward && ck.step >= b.step => {}
            _ => best = Some(ck),
        }
    }
    best.ok_or(Error::Empty("checkpoint list"))
}

/// The judges a run is scored with.
#[derive(Debug, Clone, Copy)]
pub struct Judges<'a> {
    pub gt: &'a JudgeModel,
    /// When present, training (annotation and selection) uses this model.
    pub learnt: Option<&'a JudgeModel>,
}

impl<'a> Judges<'a> {
    pub fn gt_only(gt: &'a JudgeModel) -> Self {
        Self { gt, learnt: None }
    }

    pub fn training(&self) -> &'a JudgeModel {
        self.learnt.unwrap_or(self.gt)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub best: Checkpoint,
    pub checkpoints: Vec<Checkpoint>,
    pub final_policy: FactorizedPolicy,
    pub log: RunLog,
}

/// Per-iteration results of [`iterative_train`].
#[derive(Debug, Clone)]
pub struct IterativeOutput {
    /// Best checkpoint of every iteration.
    pub iterations: Vec<Checkpoint>,
    pub log: RunLog,
}

fn mean_reward(policy: &FactorizedPolicy, judge: &JudgeModel, prompts: &[Prompt]) -> Result<f64> {
    let mut total = 0.0;
    for p in prompts {
        total += expected_reward(policy, judge, p.context)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Mean exact `KL(π‖π_ref)` over the prompts.
pub fn mean_kl(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    prompts: &[Prompt],
) -> Result<f64> {
    let mut total = 0.0;
    for p in prompts {
        total += policy.exact_kl(reference, p.context)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Validation average reward of a policy under the run's training judge.
pub fn validation_reward(
    policy: &FactorizedPolicy,
    judges: &Judges<'_>,
    valid: &[Prompt],
) -> Result<f64> {
    mean_reward(policy, judges.training(), valid)
}

/// Shared bookkeeping of one trainer call.
struct Session<'a> {
    cfg: &'a TrainerConfig,
    reference: &'a FactorizedPolicy,
    judges: Judges<'a>,
    valid: &'a [Prompt],
    iteration: usize,
    step_offset: usize,
    policy: FactorizedPolicy,
    state: OptimizerState,
    log: RunLog,
    checkpoints: Vec<Checkpoint>,
    loss_sum: f64,
    loss_count: usize,
}

impl<'a> Session<'a> {
    fn new(
        cfg: &'a TrainerConfig,
        reference: &'a FactorizedPolicy,
        judges: Judges<'a>,
        valid: &'a [Prompt],
        iteration: usize,
        step_offset: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if valid.is_empty() {
            return Err(Error::Empty("validation prompt set"));
        }
        judges
            .gt
            .feature_map
            .vocab
            .eq(&reference.vocab())
            .then_some(())
            .ok_or_else(|| Error::ShapeMismatch("judge and policy vocabularies differ".into()))?;
        Ok(Self {
            cfg,
            reference,
            judges,
            valid,
            iteration,
            step_offset,
            policy: reference.clone(),
            state: OptimizerState::new(reference.logits().len()),
            log: RunLog::default(),
            checkpoints: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    fn record(&mut self, local_step: usize, as_checkpoint: bool) -> Result<()> {
        let gt_reward = mean_reward(&self.policy, self.judges.gt, self.valid)?;
        let learnt_reward = match self.judges.learnt {
            Some(rm) => Some(mean_reward(&self.policy, rm, self.valid)?),
            None => None,
        };
        let valid_reward = learnt_reward.unwrap_or(gt_reward);
        let step = self.step_offset + local_step;
        let loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.log.records.push(LogRecord {
            step,
            iteration: self.iteration,
            loss,
            valid_reward,
            kl: mean_kl(&self.policy, self.reference, self.valid)?,
            learnt_reward,
            gt_reward,
        });
        if as_checkpoint {
            self.checkpoints.push(Checkpoint {
                policy: self.policy.clone(),
                step,
                iteration: self.iteration,
                valid_reward,
            });
        }
        Ok(())
    }

    fn start(&mut self) -> Result<()> {
        // the untrained policy is logged once per run, and is only a
        // checkpoint candidate when no step is taken at all
        if self.iteration == 0 || self.cfg.steps == 0 {
            self.record(0, self.cfg.steps == 0)?;
        }
        Ok(())
    }

    fn step(&mut self, local_step: usize, batch: &[PreferenceExample]) -> Result<()> {
        let (loss, mut grad) = batch_loss_and_grad(&self.policy, self.reference, batch, self.cfg)?;
        let global = self.step_offset + local_step;
        if self.cfg.inject_nonfinite_at_step == Some(global) {
            grad.values_mut()[0] = f64::NAN;
        }
        if !grad.is_finite() || !loss.is_finite() {
            let batch_json = serde_json::to_string(batch).ok();
            return Err(Error::NonFiniteGradient {
                step: global,
                iteration: self.iteration,
                batch: batch_json,
            });
        }
        if let Some(c) = self.cfg.clip_norm {
            let n = grad.norm();
            if n > c {
                grad.scale(c / n);
            }
        }
        optimizer_step(&mut self.policy, &grad, &mut self.state, self.cfg)?;
        self.loss_sum += loss;
        self.loss_count += 1;
        if local_step % self.cfg.checkpoint_every == 0 || local_step == self.cfg.steps {
            self.record(local_step, true)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<TrainOutput> {
        let best = select_best_checkpoint(&self.checkpoints)?.clone();
        Ok(TrainOutput {
            best,
            checkpoints: self.checkpoints,
            final_policy: self.policy,
            log: self.log,
        })
    }
}

/// Mean loss and gradient over a minibatch. Both trainers go through here,
/// so identical batches give identical gradients regardless of provenance.
pub fn batch_loss_and_grad(
    policy: &FactorizedPolicy,
    reference: &FactorizedPolicy,
    batch: &[PreferenceExample],
    cfg: &TrainerConfig,
) -> Result<(f64, PolicyGrad)> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    let mut grad = PolicyGrad::zeros_like(policy);
    let mut loss = 0.0;
    for ex in batch {
        let (l, g) = match cfg.objective.baseline() {
            Some(kind) => baseline_loss_and_grad(kind, policy, reference, ex, &cfg.loss)?,
            None => rpo_loss_and_grad(policy, reference, ex, &cfg.loss)?,
        };
        loss += l;
        grad.add(&g);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

fn run_offline(
    dataset: &PreferenceDataset,
    reference: &FactorizedPolicy,
    judges: Judges<'_>,
    valid: &[Prompt],
    cfg: &TrainerConfig,
    iteration: usize,
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    if dataset.provenance.judge_id != judges.training().id {
        return Err(Error::JudgeMismatch(format!(
            "dataset annotated by {}, run trains against {}",
            dataset.provenance.judge_id,
            judges.training().id
        )));
    }
    if let Some(ex) = dataset.examples.iter().find(|e| e.k() != cfg.k) {
        return Err(Error::InvalidParameter(format!(
            "dataset example for prompt {} has K={}, config expects K={}",
            ex.prompt_id,
            ex.k(),
            cfg.k
        )));
    }
    let mut s = Session::new(
        cfg,
        reference,
        judges,
        valid,
        iteration,
        iteration * cfg.steps,
    )?;
    s.start()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 * iteration as u64));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for t in 1..=cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset.examples[order[cursor]].clone());
            cursor += 1;
        }
        s.step(t, &batch)?;
    }
    s.finish()
}

/// Minibatch descent on a fixed, pre-annotated dataset.
pub fn offline_rpo_train(
    dataset: &PreferenceDataset,
    reference: &FactorizedPolicy,
    judges: Judges<'_>,
    valid: &[Prompt],
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    run_offline(dataset, reference, judges, valid, cfg, 0)
}

fn run_online(
    prompts: &[Prompt],
    reference: &FactorizedPolicy,
    judges: Judges<'_>,
    valid: &[Prompt],
    cfg: &TrainerConfig,
    iteration: usize,
) -> Result<TrainOutput> {
    if prompts.is_empty() {
        return Err(Error::Empty("training prompt set"));
    }
    let judge = judges.training();
    let mut s = Session::new(
        cfg,
        reference,
        judges,
        valid,
        iteration,
        iteration * cfg.steps,
    )?;
    s.start()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 * iteration as u64 + 1));
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for t in 1..=cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = prompts[order[cursor]];
            cursor += 1;
            let responses = s.policy.sample_with(p.context, cfg.k, 1.0, &mut rng)?;
            if responses.iter().all(|y| y == &responses[0]) {
                s.log.degenerate_groups += 1;
            }
            let rewards = responses
                .iter()
                .map(|y| judge.reward(p.context, y))
                .collect::<Result<Vec<_>>>()?;
            let (chosen, rejected) = pick_pair(&rewards, &mut rng);
            batch.push(PreferenceExample::new(
                p.id,
                p.context,
                responses,
                RewardVector::new(rewards)?,
                chosen,
                rejected,
            )?);
        }
        s.step(t, &batch)?;
    }
    s.finish()
}

/// Each step samples K fresh responses per prompt from the current policy
/// and annotates them with the training judge.
pub fn online_rpo_train(
    prompts: &[Prompt],
    reference: &FactorizedPolicy,
    judges: Judges<'_>,
    valid: &[Prompt],
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    run_online(prompts, reference, judges, valid, cfg, 0)
}

/// `cfg.iterations` rounds; each round starts from the previous round's
/// selected policy and uses it as the reference. Offline rounds regenerate
/// the dataset from that policy.
pub fn iterative_train(
    prompts: &[Prompt],
    reference: &FactorizedPolicy,
    judges: Judges<'_>,
    valid: &[Prompt],
    cfg: &TrainerConfig,
) -> Result<IterativeOutput> {
    cfg.validate()?;
    let mut current = reference.clone();
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut log = RunLog::default();
    for i in 0..cfg.iterations {
        let out = match cfg.mode {
            TrainMode::Offline => {
                let ds = generate_preference_dataset(
                    &current,
                    judges.training(),
                    prompts,
                    cfg.k,
                    derive_seed(cfg.seed ^ 0x5EED_DA7A, i as u64),
                    &format!("iteration-{i}"),
                )?;
                run_offline(&ds, &current, judges, valid, cfg, i)?
            }
            TrainMode::Online => run_online(prompts, &current, judges, valid, cfg, i)?,
        };
        log.append(out.log);
        current = out.best.policy.clone();
        iterations.push(out.best);
    }
    Ok(IterativeOutput { iterations, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, ToyEnv};
    use crate::metrics::MarginTarget;
    use crate::objectives::implicit_rewards;

    fn env() -> ToyEnv {
        ToyEnv::build(&EnvConfig::default()).unwrap()
    }

    fn offline_cfg(seed: u64) -> TrainerConfig {
        let mut cfg = TrainerConfig::new(
            TrainMode::Offline,
            4,
            LossConfig::new(MetricKind::BwdCategorical, 1.0, 1.0),
            seed,
        );
        cfg.steps = 60;
        cfg.batch_size = 8;
        cfg.checkpoint_every = 20;
        cfg
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let e = env();
        let mut p = e.reference.clone();
        let mut g = PolicyGrad::zeros_like(&p);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let mut cfg = offline_cfg(0);
        cfg.learning_rate = 1.0;
        let mut st = OptimizerState::new(p.logits().len());
        optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        for ((a, b), gv) in p.logits().iter().zip(e.reference.logits()).zip(g.values()) {
            assert_eq!(*a, b - gv);
        }
    }

    #[test]
    fn zero_gradient_adam_keeps_policy_and_decays_moments() {
        let e = env();
        let mut p = e.reference.clone();
        let mut cfg = offline_cfg(0);
        cfg.optimizer = OptimizerKind::Adam;
        let mut st = OptimizerState::new(p.logits().len());
        st.m.iter_mut().for_each(|m| *m = 0.0);
        let zero = PolicyGrad::zeros_like(&p);
        optimizer_step(&mut p, &zero, &mut st, &cfg).unwrap();
        assert_eq!(p, e.reference);
        assert_eq!(st.t, 1);
        let mut st2 = OptimizerState::new(p.logits().len());
        st2.m.iter_mut().for_each(|m| *m = 1.0);
        st2.v.iter_mut().for_each(|v| *v = 1.0);
        let mut q = e.reference.clone();
        optimizer_step(&mut q, &zero, &mut st2, &cfg).unwrap();
        assert!((st2.m[0] - 0.9).abs() < 1e-15 && (st2.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_is_rejected() {
        let e = env();
        let mut p = e.reference.clone();
        let mut g = PolicyGrad::zeros_like(&p);
        g.values_mut()[3] = f64::INFINITY;
        let mut st = OptimizerState::new(p.logits().len());
        assert!(optimizer_step(&mut p, &g, &mut st, &offline_cfg(0)).is_err());
    }

    #[test]
    fn zero_steps_returns_reference() {
        let e = env();
        let ds =
            generate_preference_dataset(&e.reference, &e.gt, &e.split.train, 4, 1, "ref").unwrap();
        let mut cfg = offline_cfg(0);
        cfg.steps = 0;
        let out = offline_rpo_train(
            &ds,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.best.policy, e.reference);
        assert_eq!(out.log.records.len(), 1);
    }

    #[test]
    fn offline_is_deterministic_and_reference_is_untouched() {
        let e = env();
        let ds =
            generate_preference_dataset(&e.reference, &e.gt, &e.split.train, 4, 1, "ref").unwrap();
        let before = serde_json::to_string(&e.reference).unwrap();
        let cfg = offline_cfg(3);
        let a = offline_rpo_train(
            &ds,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        let b = offline_rpo_train(
            &ds,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_policy, b.final_policy);
        assert_eq!(serde_json::to_string(&e.reference).unwrap(), before);
        let steps: Vec<usize> = a.log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 20, 40, 60]);
    }

    #[test]
    fn dpo_single_example_margin_becomes_positive() {
        let e = env();
        let ds = generate_preference_dataset(&e.reference, &e.gt, &e.split.train[..1], 2, 5, "ref")
            .unwrap();
        let mut ex = ds.examples[0].clone();
        // make the starting margin negative by swapping labels when needed
        let mut cfg = TrainerConfig::new(
            TrainMode::Offline,
            2,
            LossConfig::new(MetricKind::BwdBernoulli, 0.5, 1.0)
                .with_margin_target(MarginTarget::PlusInfinity),
            0,
        );
        cfg.objective = Objective::Dpo;
        cfg.steps = 200;
        cfg.batch_size = 1;
        cfg.learning_rate = 0.1;
        if ex.responses[0] == ex.responses[1] {
            ex.responses[1] = crate::policy::Response(vec![3, 2, 1, 0]);
        }
        let ds1 = PreferenceDataset {
            examples: vec![ex.clone()],
            provenance: ds.provenance.clone(),
        };
        let out = offline_rpo_train(
            &ds1,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        let r = implicit_rewards(&out.final_policy, &e.reference, &ex, cfg.loss.beta).unwrap();
        assert!(r[ex.chosen_idx] - r[ex.rejected_idx] > 0.0);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let e = env();
        let p = FactorizedPolicy::random(12, e.vocab, 1.7, 77);
        let ck = Checkpoint {
            policy: p,
            step: 25,
            iteration: 1,
            valid_reward: 0.1 + 0.2,
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.policy.logits().iter().zip(ck.policy.logits()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn best_checkpoint_rules() {
        let e = env();
        let ck = |step, r| Checkpoint {
            policy: e.reference.clone(),
            step,
            iteration: 0,
            valid_reward: r,
        };
        assert!(select_best_checkpoint(&[]).is_err());
        assert_eq!(select_best_checkpoint(&[ck(5, 1.0)]).unwrap().step, 5);
        let inc = [ck(25, 0.1), ck(50, 0.2), ck(75, 0.3)];
        assert_eq!(select_best_checkpoint(&inc).unwrap().step, 75);
        let tie = [ck(25, 0.1), ck(50, 0.4), ck(100, 0.4)];
        assert_eq!(select_best_checkpoint(&tie).unwrap().step, 50);
    }

    #[test]
    fn injected_nonfinite_gradient_aborts() {
        let e = env();
        let ds =
            generate_preference_dataset(&e.reference, &e.gt, &e.split.train, 4, 1, "ref").unwrap();
        let mut cfg = offline_cfg(0);
        cfg.inject_nonfinite_at_step = Some(7);
        match offline_rpo_train(
            &ds,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        ) {
            Err(Error::NonFiniteGradient { step, batch, .. }) => {
                assert_eq!(step, 7);
                assert!(batch.unwrap().contains("prompt_id"));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn pair_objective_needs_k_two() {
        let mut cfg = offline_cfg(0);
        cfg.objective = Objective::Dpo;
        assert!(cfg.validate().is_err());
        cfg.k = 2;
        cfg.validate().unwrap();
    }

    #[test]
    fn offline_and_online_share_gradients() {
        let e = env();
        let ds = generate_preference_dataset(&e.reference, &e.gt, &e.split.train[..8], 4, 1, "ref")
            .unwrap();
        let cfg = offline_cfg(0);
        let (l1, g1) = batch_loss_and_grad(&e.reference, &e.reference, &ds.examples, &cfg).unwrap();
        let mut online = cfg.clone();
        online.mode = TrainMode::Online;
        let (l2, g2) =
            batch_loss_and_grad(&e.reference, &e.reference, &ds.examples, &online).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn iterations_one_matches_single_offline_run() {
        let e = env();
        let cfg = offline_cfg(4);
        let it = iterative_train(
            &e.split.train,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        let ds = generate_preference_dataset(
            &e.reference,
            &e.gt,
            &e.split.train,
            cfg.k,
            derive_seed(cfg.seed ^ 0x5EED_DA7A, 0),
            "iteration-0",
        )
        .unwrap();
        let single = offline_rpo_train(
            &ds,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        assert_eq!(it.log, single.log);
        assert_eq!(it.iterations, vec![single.best]);
    }

    #[test]
    fn online_logs_finite_kl_and_improves() {
        let e = env();
        let mut cfg = TrainerConfig::new(
            TrainMode::Online,
            4,
            LossConfig::new(MetricKind::BwdCategorical, 1.0, 1.0),
            2,
        );
        cfg.steps = 100;
        cfg.learning_rate = 0.1;
        let out = online_rpo_train(
            &e.split.train,
            &e.reference,
            Judges::gt_only(&e.gt),
            &e.split.valid,
            &cfg,
        )
        .unwrap();
        assert!(out.log.records.iter().all(|r| r.kl.is_finite()));
        assert_eq!(out.log.records.len(), 5);
        let first = out.log.records.first().unwrap().gt_reward;
        assert!(out.best.valid_reward > first);
    }
}
