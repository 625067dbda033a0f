//! End-to-end runs driven by an [`ExperimentConfig`].

use serde::{Deserialize, Serialize};

use crate::config::{build_learnt_judge, ExperimentConfig};
use crate::data::{generate_preference_dataset, PreferenceDataset};
use crate::env::{derive_seed, ToyEnv};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, Baseline, EvalReport};
use crate::judge::JudgeModel;
use crate::training::{
    iterative_train, mean_kl, offline_rpo_train, online_rpo_train, Checkpoint, Judges, RunLog,
    TrainMode,
};

/// Stream of [`derive_seed`] reserved for the offline dataset of a run.
pub const DATASET_STREAM: u64 = 0xDA7A;

/// Environment plus the optional learnt RM of one config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub env: ToyEnv,
    pub learnt: Option<JudgeModel>,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let env = ToyEnv::build(&cfg.env)?;
        let learnt = build_learnt_judge(&env, &cfg.judge)?;
        Ok(Self { env, learnt })
    }

    pub fn judges(&self) -> Judges<'_> {
        Judges {
            gt: &self.env.gt,
            learnt: self.learnt.as_ref(),
        }
    }
}

/// Seed of the offline dataset the run trains on.
pub fn dataset_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.trainer.seed, DATASET_STREAM)
}

/// Reference samples on the training prompts, annotated by the training judge.
pub fn offline_dataset(cfg: &ExperimentConfig, setup: &Setup) -> Result<PreferenceDataset> {
    generate_preference_dataset(
        &setup.env.reference,
        setup.judges().training(),
        &setup.env.split.train,
        cfg.trainer.k,
        dataset_seed(cfg),
        "reference",
    )
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    /// Selected checkpoint of each iteration.
    pub iterations: Vec<Checkpoint>,
    pub log: RunLog,
}

impl ExperimentRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.iterations.last().expect("at least one iteration")
    }
}

/// Trains according to the trainer block. A single-iteration offline run
/// uses `dataset` when given, else generates its own.
pub fn run_training(
    cfg: &ExperimentConfig,
    setup: &Setup,
    dataset: Option<&PreferenceDataset>,
) -> Result<ExperimentRun> {
    let env = &setup.env;
    let judges = setup.judges();
    let tc = &cfg.trainer;
    if tc.iterations > 1 {
        if dataset.is_some() {
            return Err(Error::Config(
                "output.dataset: iterative runs regenerate their data each iteration".into(),
            ));
        }
        let out = iterative_train(&env.split.train, &env.reference, judges, &env.split.valid, tc)?;
        return Ok(ExperimentRun {
            iterations: out.iterations,
            log: out.log,
        });
    }
    let out = match tc.mode {
        TrainMode::Offline => {
            let generated;
            let ds = match dataset {
                Some(ds) => ds,
                None => {
                    generated = offline_dataset(cfg, setup)?;
                    &generated
                }
            };
            offline_rpo_train(ds, &env.reference, judges, &env.split.valid, tc)?
        }
        TrainMode::Online => {
            if dataset.is_some() {
                return Err(Error::Config(
                    "output.dataset: online runs sample their own responses".into(),
                ));
            }
            online_rpo_train(&env.split.train, &env.reference, judges, &env.split.valid, tc)?
        }
    };
    Ok(ExperimentRun {
        iterations: vec![out.best],
        log: out.log,
    })
}

/// Ground-truth reports of a policy against the reference on every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReports {
    pub valid: EvalReport,
    pub test: EvalReport,
    pub ood: Option<EvalReport>,
    /// Mean exact KL to the reference over the test prompts.
    pub test_kl: f64,
}

pub fn evaluate_splits(
    cfg: &ExperimentConfig,
    env: &ToyEnv,
    policy: &crate::policy::FactorizedPolicy,
    baseline: &crate::policy::FactorizedPolicy,
) -> Result<SplitReports> {
    let decode = cfg.eval.decode;
    let report = |prompts| evaluate_policy(policy, &env.gt, prompts, Baseline::Policy(baseline), decode);
    Ok(SplitReports {
        valid: report(&env.split.valid)?,
        test: report(&env.split.test)?,
        ood: if env.split.ood.is_empty() {
            None
        } else {
            Some(report(&env.split.ood)?)
        },
        test_kl: mean_kl(policy, &env.reference, &env.split.test)?,
    })
}
