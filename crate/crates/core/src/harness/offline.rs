use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ExperimentConfig, RunSeeds};
use crate::crr::{offline_train, EvalRecord};
use crate::error::{Error, Result};
use crate::kv::fmt_f64;
use crate::mpo::LearnerState;
use crate::replay::{EpisodeLog, ReplayBuffer};
use crate::tensor::{read_checkpoint, write_checkpoint};

pub const PROVENANCE_FILE: &str = "provenance.txt";
const LATEST: &str = "learner_latest.bofp";
const EVAL_HEADER: &str = "learner_steps,mean_eval_return";

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineSummary {
    pub dataset_sha256: String,
    pub transitions: usize,
    /// Update count the run started from (non-zero after a resume).
    pub resumed_from: u64,
    pub learner_steps: u64,
    pub evals: Vec<EvalRecord>,
}

/// CRR on a logged dataset for `cfg.steps` learner steps, evaluated on
/// `cfg.task` every `crr.eval_period` steps.
///
/// Artifacts in `out`: `config.txt`, `provenance.txt` (dataset path and
/// SHA-256), `eval.csv` and `checkpoints/`. With `resume` set, training
/// continues from `checkpoints/learner_latest.bofp` when present.
pub fn run_offline(cfg: &ExperimentConfig, dataset: &Path) -> Result<OfflineSummary> {
    cfg.validate()?;
    let bytes = fs::read(dataset)?;
    let sha = hex::encode(Sha256::digest(&bytes));
    let log = EpisodeLog::from_bytes(&bytes)?;
    drop(bytes);
    let mut env = cfg.env()?;
    if log.header.obs_len() != env.obs_dim() {
        return Err(Error::Config(format!(
            "dataset observations have {} values, task {} expects {}",
            log.header.obs_len(),
            cfg.task,
            env.obs_dim()
        )));
    }
    let transitions = log.transitions.len();
    let mut data = ReplayBuffer::new(transitions.max(1))?;
    for t in log.transitions {
        data.push(t);
    }

    cfg.prepare_out()?;
    fs::write(
        cfg.out.join(PROVENANCE_FILE),
        format!(
            "dataset = {}\nsha256 = {sha}\ntransitions = {transitions}\n",
            dataset.display()
        ),
    )?;
    let seeds = RunSeeds::new(cfg.seed);
    let ckpt = cfg.out.join("checkpoints");
    let latest = ckpt.join(LATEST);
    let eval_path = cfg.out.join("eval.csv");

    let mut state = if cfg.resume && latest.exists() {
        LearnerState::from_tensors(&cfg.mpo, read_checkpoint(&latest)?)?
    } else {
        LearnerState::new(&cfg.mpo, env.obs_dim(), cfg.obs_half(), seeds.learner)?
    };
    let resumed_from = state.updates;

    // Keep the evaluations the checkpoint already covers.
    let mut eval_text = String::from(EVAL_HEADER);
    eval_text.push('\n');
    if resumed_from > 0 {
        if let Ok(old) = fs::read_to_string(&eval_path) {
            for line in old.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s <= resumed_from) {
                    eval_text.push_str(line);
                    eval_text.push('\n');
                }
            }
        }
    }
    fs::write(&eval_path, &eval_text)?;

    let evals = offline_train(
        &mut state,
        &cfg.mpo,
        &cfg.crr,
        &data,
        cfg.steps,
        &mut env,
        seeds.eval,
        |st, rec| {
            eval_text.push_str(&format!("{},{}\n", rec.learner_steps, fmt_f64(rec.mean_return)));
            fs::write(&eval_path, &eval_text)?;
            write_checkpoint(
                ckpt.join(format!("policy_{:010}.bofp", rec.learner_steps)),
                &st.policy.to_tensors(),
            )?;
            write_checkpoint(&latest, &st.to_tensors())
        },
    )?;
    write_checkpoint(ckpt.join("policy_final.bofp"), &state.policy.to_tensors())?;
    write_checkpoint(ckpt.join("learner_final.bofp"), &state.to_tensors())?;
    Ok(OfflineSummary {
        dataset_sha256: sha,
        transitions,
        resumed_from,
        learner_steps: state.updates,
        evals,
    })
}
