//! Preference-dataset generation and its line-delimited JSON format.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, Prompt};
use crate::error::{Error, Result};
use crate::judge::JudgeModel;
use crate::metrics::RewardVector;
use crate::objectives::PreferenceExample;
use crate::policy::{FactorizedPolicy, Response};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub judge_id: String,
    pub seed: u64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub examples: Vec<PreferenceExample>,
    pub provenance: Provenance,
}

/// One JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetLine {
    prompt_id: usize,
    context: usize,
    responses: Vec<Response>,
    rewards: Vec<f64>,
    chosen_idx: usize,
    rejected_idx: usize,
    judge_id: String,
    seed: u64,
}

/// Index of the largest reward, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Samples K responses per prompt, scores them all, picks the argmax as
/// chosen and a uniformly random other response as rejected.
pub fn generate_preference_dataset(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    prompts: &[Prompt],
    k: usize,
    seed: u64,
    generator: &str,
) -> Result<PreferenceDataset> {
    if k < 2 {
        return Err(Error::TooFewResponses(k));
    }
    let examples = prompts
        .par_iter()
        .map(|p| annotate_prompt(policy, judge, p, k, derive_seed(seed, p.id as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreferenceDataset {
        examples,
        provenance: Provenance {
            generator: generator.to_string(),
            judge_id: judge.id.clone(),
            seed,
            k,
        },
    })
}

fn annotate_prompt(
    policy: &FactorizedPolicy,
    judge: &JudgeModel,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> Result<PreferenceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responses = policy.sample_with(prompt.context, k, 1.0, &mut rng)?;
    let rewards = responses
        .iter()
        .map(|y| judge.reward(prompt.context, y))
        .collect::<Result<Vec<_>>>()?;
    let (chosen, rejected) = pick_pair(&rewards, &mut rng);
    PreferenceExample::new(
        prompt.id,
        prompt.context,
        responses,
        RewardVector::new(rewards)?,
        chosen,
        rejected,
    )
}

pub(crate) fn pick_pair<R: Rng + ?Sized>(rewards: &[f64], rng: &mut R) -> (usize, usize) {
    let chosen = argmax_lowest(rewards);
    let mut rejected = rng.random_range(0..rewards.len() - 1);
    if rejected >= chosen {
        rejected += 1;
    }
    (chosen, rejected)
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples whose chosen and rejected rewards coincide.
    pub fn tied_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_tied()).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for ex in &self.examples {
            let line = DatasetLine {
                prompt_id: ex.prompt_id,
                context: ex.context,
                responses: ex.responses.clone(),
                rewards: ex.gt_rewards.as_slice().to_vec(),
                chosen_idx: ex.chosen_idx,
                rejected_idx: ex.rejected_idx,
                judge_id: self.provenance.judge_id.clone(),
                seed: derive_seed(self.provenance.seed, ex.prompt_id as u64),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Reads a dataset back. Provenance seed and generator are not part of
    /// the line format, so they come from the caller.
    pub fn read_jsonl<R: BufRead>(input: R, provenance: Provenance) -> Result<Self> {
        let mut examples = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetLine = serde_json::from_str(&line)?;
            if rec.judge_id != provenance.judge_id {
                return Err(Error::JudgeMismatch(format!(
                    "line annotated by {} but dataset claims {}",
                    rec.judge_id, provenance.judge_id
                )));
            }
            examples.push(PreferenceExample::new(
                rec.prompt_id,
                rec.context,
                rec.responses,
                RewardVector::new(rec.rewards)?,
                rec.chosen_idx,
                rec.rejected_idx,
            )?);
        }
        Ok(Self {
            examples,
            provenance,
        })
    }
}
