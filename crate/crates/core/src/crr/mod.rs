//! Offline actor-critic: the critic is fitted by TD on logged transitions
//! and the policy by advantage-weighted regression onto the logged actions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::mpo::{
    evaluate, normalize_obs, policy_graph, repeat_rows, sample_pre_squash, squash, unsquash,
    weighted_nll, Critic, LearnerState, MpoConfig, Policy,
};
use crate::replay::ReplayBuffer;
use crate::tasks::TaskEnv;
use crate::tensor::{adam_step, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CrrConfig {
    /// Temperature of the exponential advantage weights.
    pub beta: f64,
    /// Upper clip of the weights.
    pub w_max: f64,
    /// Policy samples in the value baseline.
    pub baseline_samples: usize,
    pub batch_size: usize,
    /// Learner steps between evaluations.
    pub eval_period: u64,
    pub eval_episodes: usize,
}

impl Default for CrrConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            w_max: 20.0,
            baseline_samples: 4,
            batch_size: 256,
            eval_period: 10_000,
            eval_episodes: 10,
        }
    }
}

pub(crate) const CRR_KEYS: &[&str] = &[
    "beta",
    "w_max",
    "baseline_samples",
    "batch_size",
    "eval_period",
    "eval_episodes",
];

impl CrrConfig {
    pub fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "beta" => self.beta = kv::parse_f64(e)?,
            "w_max" => self.w_max = kv::parse_f64(e)?,
            "baseline_samples" => self.baseline_samples = kv::parse_usize(e)?,
            "batch_size" => self.batch_size = kv::parse_usize(e)?,
            "eval_period" => self.eval_period = kv::parse_u64(e)?,
            "eval_episodes" => self.eval_episodes = kv::parse_usize(e)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.w_max >= 1.0) {
            return Err(Error::Config(format!("w_max must be at least 1, got {}", self.w_max)));
        }
        if self.baseline_samples == 0 || self.batch_size == 0 || self.eval_period == 0 {
            return Err(Error::Config(
                "baseline_samples, batch_size and eval_period must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv_string(&self, prefix: &str) -> String {
        format!(
            "{prefix}beta = {}\n{prefix}w_max = {}\n{prefix}baseline_samples = {}\n{prefix}batch_size = {}\n{prefix}eval_period = {}\n{prefix}eval_episodes = {}\n",
            kv::fmt_f64(self.beta),
            kv::fmt_f64(self.w_max),
            self.baseline_samples,
            self.batch_size,
            self.eval_period,
            self.eval_episodes,
        )
    }
}

/// `Q(s, a) - mean_j Q(s, a_j)` with `a_j` drawn from the policy at `s`.
/// `obs` holds raw pixel rows, `actions` rows in `[0, 1]`.
pub fn advantages<R: Rng + ?Sized>(
    critic: &Critic,
    policy: &Policy,
    obs: &Tensor,
    actions: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Config("advantage baseline needs at least one sample".into()));
    }
    let obs_n = normalize_obs(obs, policy.obs_half);
    let q = critic.q(&obs_n, actions)?;
    let (mean, log_std) = policy.distribution(obs)?;
    let a = sample_pre_squash(&mean, &log_std, m, rng).map(squash);
    let qb = critic.q(&repeat_rows(&obs_n, m), &a)?;
    Ok(q.iter()
        .zip(qb.chunks_exact(m))
        .map(|(q, b)| q - b.iter().sum::<f64>() / m as f64)
        .collect())
}

/// `min(exp(A / beta), w_max)`, kept strictly positive.
pub fn crr_weights(adv: &[f64], beta: f64, w_max: f64) -> Vec<f64> {
    adv.iter()
        .map(|a| (a / beta).exp().min(w_max).max(f64::MIN_POSITIVE))
        .collect()
}

/// `-mean_i w_i log pi(a_i | s_i)` over logged pairs, with the likelihood
/// taken in pre-squash coordinates. Returns the loss and its gradient.
pub fn crr_policy_loss(
    policy: &Policy,
    obs: &Tensor,
    actions: &Tensor,
    weights: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    if obs.rows() == 0 {
        return Err(Error::InsufficientData("empty CRR batch".into()));
    }
    if actions.rows() != obs.rows() || weights.len() != obs.rows() {
        return Err(Error::shape(format!(
            "CRR batch: {} states, {} actions, {} weights",
            obs.rows(),
            actions.rows(),
            weights.len()
        )));
    }
    let z = actions.map(unsquash);
    let x = normalize_obs(obs, policy.obs_half);
    crate::tensor::grad(policy.net.tensors(), |g, vars| {
        let xv = g.constant(x);
        let (mean, log_std) = policy_graph(g, &policy.net, vars, xv)?;
        weighted_nll(g, mean, log_std, &z, weights, 1)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrrStats {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub mean_weight: f64,
}

/// One critic step and one weighted-regression policy step on a batch
/// drawn from `data`. Uses the per-update random stream of `state`.
pub fn crr_step(
    state: &mut LearnerState,
    mpo: &MpoConfig,
    cfg: &CrrConfig,
    data: &ReplayBuffer,
) -> Result<CrrStats> {
    let mut rng = state.update_rng(state.updates);
    let batch = data.sample_dense(cfg.batch_size, &mut rng)?;
    let half = state.policy.obs_half;
    let obs_n = normalize_obs(&batch.obs, half);
    let next_n = normalize_obs(&batch.next_obs, half);
    let critic_loss = state.critic_step(mpo, &batch, &obs_n, &next_n, &mut rng)?;
    let adv = advantages(
        &state.critic,
        &state.policy,
        &batch.obs,
        &batch.action,
        cfg.baseline_samples,
        &mut rng,
    )?;
    let w = crr_weights(&adv, cfg.beta, cfg.w_max);
    let (policy_loss, grads) = crr_policy_loss(&state.policy, &batch.obs, &batch.action, &w)?;
    if !policy_loss.is_finite() {
        return Err(Error::NonFinite(format!("CRR policy loss at update {}", state.updates)));
    }
    adam_step(state.policy.net.tensors_mut(), &grads, &mut state.policy_opt)?;
    state.finish_update(mpo.target_period);
    Ok(CrrStats {
        critic_loss,
        policy_loss,
        mean_weight: w.iter().sum::<f64>() / w.len() as f64,
    })
}

/// Behaviour cloning: the same batch a CRR step would draw, unit weights,
/// no critic.
pub fn bc_step(
    state: &mut LearnerState,
    mpo: &MpoConfig,
    cfg: &CrrConfig,
    data: &ReplayBuffer,
) -> Result<f64> {
    let mut rng = state.update_rng(state.updates);
    let batch = data.sample_dense(cfg.batch_size, &mut rng)?;
    let w = vec![1.0; batch.obs.rows()];
    let (loss, grads) = crr_policy_loss(&state.policy, &batch.obs, &batch.action, &w)?;
    adam_step(state.policy.net.tensors_mut(), &grads, &mut state.policy_opt)?;
    state.finish_update(mpo.target_period);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub learner_steps: u64,
    pub mean_return: f64,
}

/// Runs CRR until `state.updates == total_steps`, evaluating the mean-mode
/// policy on `env` whenever the update count reaches a multiple of the
/// evaluation period. `on_eval` sees the state right after each
/// evaluation (checkpointing hooks in here). Resumes from whatever update
/// count `state` already carries.
#[allow(clippy::too_many_arguments)]
pub fn offline_train(
    state: &mut LearnerState,
    mpo: &MpoConfig,
    cfg: &CrrConfig,
    data: &ReplayBuffer,
    total_steps: u64,
    env: &mut TaskEnv,
    eval_seed: u64,
    mut on_eval: impl FnMut(&LearnerState, &EvalRecord) -> Result<()>,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("offline dataset is empty".into()));
    }
    let mut records = Vec::new();
    while state.updates < total_steps {
        crr_step(state, mpo, cfg, data)?;
        if state.updates % cfg.eval_period == 0 {
            let r = evaluate(&state.policy, env, cfg.eval_episodes, eval_seed)?;
            let rec = EvalRecord {
                learner_steps: state.updates,
                mean_return: if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 },
            };
            on_eval(state, &rec)?;
            records.push(rec);
        }
    }
    Ok(records)
}

/// Mean Euclidean distance from each query action to its nearest
/// reference action. With `exclude_same_index`, query `i` skips reference
/// `i` (leave-one-out self distance).
pub fn mean_nn_distance(queries: &Tensor, reference: &Tensor, exclude_same_index: bool) -> Result<f64> {
    if queries.cols() != reference.cols() {
        return Err(Error::shape("action widths differ"));
    }
    if queries.rows() == 0 || reference.rows() < 1 + usize::from(exclude_same_index) {
        return Err(Error::InsufficientData("nearest-neighbour distance needs data".into()));
    }
    let mut total = 0.0;
    for i in 0..queries.rows() {
        let q = queries.row_slice(i);
        let best = (0..reference.rows())
            .filter(|&j| !(exclude_same_index && j == i))
            .map(|j| {
                q.iter()
                    .zip(reference.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        total += best.sqrt();
    }
    Ok(total / queries.rows() as f64)
}

#[cfg(test)]
mod tests;
