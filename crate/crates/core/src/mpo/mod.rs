//! Online MPO: TD-trained critic, sample-based E-step with a temperature
//! dual, and a KL-regularized M-step fitted by gradient descent.

mod losses;
mod networks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::replay::{Batch, ReplayBuffer};
use crate::tasks::TaskEnv;
use crate::tensor::{adam_step, AdamState, MlpParams, Tensor};

pub(crate) use losses::weighted_nll;
pub use losses::{
    critic_loss, estep_weights, kl_to_uniform, policy_loss, td_targets, temperature_dual,
    temperature_dual_grad, temperature_dual_step, PolicyLoss,
};
pub use networks::{
    critic_input, log_std_from_raw, normalize_obs, squash, unsquash, ActMode, Critic, Policy,
    UNIT_STD_RAW,
};
pub(crate) use networks::{policy_graph, repeat_rows, sample_pre_squash};

/// Lower bound on the temperature.
pub const ETA_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MpoConfig {
    pub gamma: f64,
    /// Action samples per state in the E-step.
    pub n_samples: usize,
    pub batch_size: usize,
    /// Learner updates per environment step.
    pub update_ratio: f64,
    pub target_period: u64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub dual_lr: f64,
    pub eps_eta: f64,
    pub eps_mean: f64,
    pub eps_std: f64,
    pub init_eta: f64,
    pub init_alpha_mean: f64,
    pub init_alpha_std: f64,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub replay_capacity: usize,
    /// Holds the temperature constant instead of optimizing its dual.
    pub fixed_beta: Option<f64>,
    /// Averages the bootstrap value over `n_samples` next actions.
    pub avg_q: bool,
}

impl Default for MpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            n_samples: 20,
            batch_size: 256,
            update_ratio: 0.25,
            target_period: 200,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            dual_lr: 1e-2,
            eps_eta: 0.1,
            eps_mean: 0.01,
            eps_std: 1e-5,
            init_eta: 1.0,
            init_alpha_mean: 1.0,
            init_alpha_std: 1.0,
            policy_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            replay_capacity: 1_000_000,
            fixed_beta: None,
            avg_q: false,
        }
    }
}

pub(crate) const MPO_KEYS: &[&str] = &[
    "gamma",
    "n_samples",
    "batch_size",
    "update_ratio",
    "target_period",
    "policy_lr",
    "critic_lr",
    "dual_lr",
    "eps_eta",
    "eps_mean",
    "eps_std",
    "init_eta",
    "init_alpha_mean",
    "init_alpha_std",
    "policy_hidden",
    "critic_hidden",
    "replay_capacity",
    "fixed_beta",
    "avg_q",
];

impl MpoConfig {
    pub fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "gamma" => self.gamma = kv::parse_f64(e)?,
            "n_samples" => self.n_samples = kv::parse_usize(e)?,
            "batch_size" => self.batch_size = kv::parse_usize(e)?,
            "update_ratio" => self.update_ratio = kv::parse_f64(e)?,
            "target_period" => self.target_period = kv::parse_u64(e)?,
            "policy_lr" => self.policy_lr = kv::parse_f64(e)?,
            "critic_lr" => self.critic_lr = kv::parse_f64(e)?,
            "dual_lr" => self.dual_lr = kv::parse_f64(e)?,
            "eps_eta" => self.eps_eta = kv::parse_f64(e)?,
            "eps_mean" => self.eps_mean = kv::parse_f64(e)?,
            "eps_std" => self.eps_std = kv::parse_f64(e)?,
            "init_eta" => self.init_eta = kv::parse_f64(e)?,
            "init_alpha_mean" => self.init_alpha_mean = kv::parse_f64(e)?,
            "init_alpha_std" => self.init_alpha_std = kv::parse_f64(e)?,
            "policy_hidden" => self.policy_hidden = kv::parse_usize_list(e)?,
            "critic_hidden" => self.critic_hidden = kv::parse_usize_list(e)?,
            "replay_capacity" => self.replay_capacity = kv::parse_usize(e)?,
            "fixed_beta" => {
                self.fixed_beta = if e.value == "none" {
                    None
                } else {
                    Some(kv::parse_f64(e)?)
                };
            }
            "avg_q" => self.avg_q = kv::parse_bool(e)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if self.batch_size == 0 || self.target_period == 0 || self.replay_capacity < self.batch_size
        {
            return Err(Error::Config(
                "batch_size and target_period must be positive and fit in the replay".into(),
            ));
        }
        for (name, v) in [
            ("eps_eta", self.eps_eta),
            ("eps_mean", self.eps_mean),
            ("eps_std", self.eps_std),
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("dual_lr", self.dual_lr),
            ("init_eta", self.init_eta),
            ("init_alpha_mean", self.init_alpha_mean),
            ("init_alpha_std", self.init_alpha_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "`{name}` must be strictly positive, got {v}"
                )));
            }
        }
        if !(self.update_ratio >= 0.0 && self.update_ratio.is_finite()) {
            return Err(Error::Config("update_ratio must be non-negative".into()));
        }
        if let Some(b) = self.fixed_beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed_beta must be strictly positive, got {b}"
                )));
            }
        }
        if self.policy_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv_string(&self, prefix: &str) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let f = kv::fmt_f64;
        let mut s = String::new();
        for (k, v) in [
            ("gamma", f(self.gamma)),
            ("n_samples", self.n_samples.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("update_ratio", f(self.update_ratio)),
            ("target_period", self.target_period.to_string()),
            ("policy_lr", f(self.policy_lr)),
            ("critic_lr", f(self.critic_lr)),
            ("dual_lr", f(self.dual_lr)),
            ("eps_eta", f(self.eps_eta)),
            ("eps_mean", f(self.eps_mean)),
            ("eps_std", f(self.eps_std)),
            ("init_eta", f(self.init_eta)),
            ("init_alpha_mean", f(self.init_alpha_mean)),
            ("init_alpha_std", f(self.init_alpha_std)),
            ("policy_hidden", list(&self.policy_hidden)),
            ("critic_hidden", list(&self.critic_hidden)),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("fixed_beta", self.fixed_beta.map_or("none".to_string(), f)),
            ("avg_q", self.avg_q.to_string()),
        ] {
            s.push_str(&format!("{prefix}{k} = {v}\n"));
        }
        s
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Everything the learner owns.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub policy: Policy,
    pub critic: Critic,
    pub target_policy: Policy,
    pub target_critic: Critic,
    pub policy_opt: AdamState,
    pub critic_opt: AdamState,
    /// `1 x 3`: log temperature, then the raw (pre-softplus) mean and
    /// covariance multipliers.
    pub duals: Tensor,
    pub dual_opt: AdamState,
    pub updates: u64,
    /// Root of the per-update random streams.
    pub seed: u64,
}

/// Diagnostics of one learner update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub policy: PolicyLoss,
    pub eta: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub estep_kl: f64,
    pub mean_q: f64,
}

impl LearnerState {
    pub fn new(cfg: &MpoConfig, obs_dim: usize, obs_half: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = Policy::init(obs_dim, &cfg.policy_hidden, obs_half, &mut rng);
        let critic = Critic::init(obs_dim, &cfg.critic_hidden, &mut rng);
        let duals = Tensor::row(vec![
            cfg.fixed_beta.unwrap_or(cfg.init_eta).ln(),
            softplus_inv(cfg.init_alpha_mean),
            softplus_inv(cfg.init_alpha_std),
        ]);
        Ok(Self {
            policy_opt: AdamState::new(policy.net.tensors(), cfg.policy_lr),
            critic_opt: AdamState::new(critic.net.tensors(), cfg.critic_lr),
            dual_opt: AdamState::new(std::slice::from_ref(&duals), cfg.dual_lr),
            target_policy: policy.clone(),
            target_critic: critic.clone(),
            policy,
            critic,
            duals,
            updates: 0,
            seed,
        })
    }

    pub fn eta(&self) -> f64 {
        self.duals.data()[0].exp()
    }

    pub fn alpha_mean(&self) -> f64 {
        softplus(self.duals.data()[1])
    }

    pub fn alpha_std(&self) -> f64 {
        softplus(self.duals.data()[2])
    }

    /// Random stream of update number `k`; a resumed learner draws exactly
    /// what an uninterrupted one would.
    pub fn update_rng(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    /// Samples a batch from `buffer` and applies one update.
    pub fn learner_step(&mut self, cfg: &MpoConfig, buffer: &ReplayBuffer) -> Result<StepStats> {
        let mut rng = self.update_rng(self.updates);
        let batch = buffer.sample_dense(cfg.batch_size, &mut rng)?;
        self.update(cfg, &batch, &mut rng)
    }

    /// Critic step, E-step, M-step and dual steps on `batch`.
    pub fn update(
        &mut self,
        cfg: &MpoConfig,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepStats> {
        let n = cfg.n_samples;
        let half = self.policy.obs_half;
        let obs_n = normalize_obs(&batch.obs, half);
        let next_n = normalize_obs(&batch.next_obs, half);

        let critic_loss = self.critic_step(cfg, batch, &obs_n, &next_n, rng)?;

        let (old_mean, old_log_std) = self.target_policy.distribution(&batch.obs)?;
        let z = sample_pre_squash(&old_mean, &old_log_std, n, rng);
        let q = self
            .target_critic
            .q(&repeat_rows(&obs_n, n), &z.map(squash))?;
        let eta = self.eta();
        let w = estep_weights(&q, n, eta)?;
        let estep_kl = kl_to_uniform(&w, n)?;

        let (alpha_mean, alpha_std) = (self.alpha_mean(), self.alpha_std());
        let (parts, grads) = policy_loss(
            &self.policy,
            &batch.obs,
            &z,
            &w,
            n,
            &old_mean,
            &old_log_std,
            alpha_mean,
            alpha_std,
        )?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "policy loss at update {}",
                self.updates
            )));
        }
        adam_step(self.policy.net.tensors_mut(), &grads, &mut self.policy_opt)?;

        let raw = self.duals.data().to_vec();
        let g_eta = if cfg.fixed_beta.is_some() {
            0.0
        } else {
            eta * (cfg.eps_eta - estep_kl)
        };
        let g_mean = squash(raw[1]) * (cfg.eps_mean - parts.kl_mean);
        let g_std = squash(raw[2]) * (cfg.eps_std - parts.kl_std);
        adam_step(
            std::slice::from_mut(&mut self.duals),
            &[Tensor::row(vec![g_eta, g_mean, g_std])],
            &mut self.dual_opt,
        )?;
        if let Some(b) = cfg.fixed_beta {
            self.duals.data_mut()[0] = b.ln();
        }
        let floor = ETA_MIN.ln();
        if self.duals.data()[0] < floor {
            self.duals.data_mut()[0] = floor;
        }

        self.finish_update(cfg.target_period);
        Ok(StepStats {
            critic_loss,
            policy: parts,
            eta,
            alpha_mean,
            alpha_std,
            estep_kl,
            mean_q: q.iter().sum::<f64>() / q.len() as f64,
        })
    }

    pub(crate) fn critic_step(
        &mut self,
        cfg: &MpoConfig,
        batch: &Batch,
        obs_n: &Tensor,
        next_n: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let k = if cfg.avg_q { cfg.n_samples } else { 1 };
        let (nm, nls) = self.policy.distribution(&batch.next_obs)?;
        let a_next = sample_pre_squash(&nm, &nls, k, rng).map(squash);
        let q_next = self.target_critic.q(&repeat_rows(next_n, k), &a_next)?;
        let q_next: Vec<f64> = q_next
            .chunks_exact(k)
            .map(|c| c.iter().sum::<f64>() / k as f64)
            .collect();
        let targets = td_targets(&batch.reward, &batch.done, &q_next, cfg.gamma)?;
        let (loss, grads) =
            critic_loss(&self.critic, &critic_input(obs_n, &batch.action)?, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "critic loss at update {}",
                self.updates
            )));
        }
        adam_step(self.critic.net.tensors_mut(), &grads, &mut self.critic_opt)?;
        Ok(loss)
    }

    /// Counts the update and refreshes the targets on period boundaries.
    pub(crate) fn finish_update(&mut self, target_period: u64) {
        self.updates += 1;
        if self.updates % target_period == 0 {
            self.target_policy = self.policy.clone();
            self.target_critic = self.critic.clone();
        }
    }

    /// Flat tensor list for checkpoint files.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let meta = Tensor::row(vec![
            self.updates as f64,
            (self.seed & 0xffff_ffff) as f64,
            (self.seed >> 32) as f64,
            self.policy.obs_half,
            self.policy_opt.step as f64,
            self.critic_opt.step as f64,
            self.dual_opt.step as f64,
            self.policy.net.tensors().len() as f64,
            self.critic.net.tensors().len() as f64,
        ]);
        let mut out = vec![meta];
        for group in [
            self.policy.net.tensors(),
            self.critic.net.tensors(),
            self.target_policy.net.tensors(),
            self.target_critic.net.tensors(),
            &self.policy_opt.m,
            &self.policy_opt.v,
            &self.critic_opt.m,
            &self.critic_opt.v,
        ] {
            out.extend_from_slice(group);
        }
        out.push(self.duals.clone());
        out.push(self.dual_opt.m[0].clone());
        out.push(self.dual_opt.v[0].clone());
        out
    }

    /// Inverse of [`to_tensors`](Self::to_tensors); learning rates come
    /// from `cfg`.
    pub fn from_tensors(cfg: &MpoConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let bad = |msg: &str| Error::Malformed(format!("learner checkpoint: {msg}"));
        let mut it = tensors.into_iter();
        let meta = it.next().ok_or_else(|| bad("empty"))?;
        let m = meta.data();
        if m.len() != 9 {
            return Err(bad("metadata has the wrong length"));
        }
        let (np, nc) = (m[7] as usize, m[8] as usize);
        let mut take = |k: usize| -> Result<Vec<Tensor>> {
            let v: Vec<Tensor> = it.by_ref().take(k).collect();
            if v.len() != k {
                return Err(bad("too few tensors"));
            }
            Ok(v)
        };
        let policy = mlp_from(take(np)?)?;
        let critic = mlp_from(take(nc)?)?;
        let target_policy = mlp_from(take(np)?)?;
        let target_critic = mlp_from(take(nc)?)?;
        let (pm, pv, cm, cv) = (take(np)?, take(np)?, take(nc)?, take(nc)?);
        let mut rest = take(3)?;
        let dv = rest.pop().unwrap();
        let dm = rest.pop().unwrap();
        let duals = rest.pop().unwrap();
        if duals.len() != 3 || dm.len() != 3 || dv.len() != 3 {
            return Err(bad("dual variables have the wrong size"));
        }
        let half = m[3];
        let adam = |params: &[Tensor],
                    mm: Vec<Tensor>,
                    vv: Vec<Tensor>,
                    lr: f64,
                    step: f64|
         -> Result<AdamState> {
            let mut st = AdamState::new(params, lr);
            for ((a, b), p) in mm.iter().zip(&vv).zip(params) {
                if a.shape() != p.shape() || b.shape() != p.shape() {
                    return Err(bad("optimizer moments do not match parameters"));
                }
            }
            st.m = mm;
            st.v = vv;
            st.step = step as u64;
            Ok(st)
        };
        let policy_opt = adam(policy.tensors(), pm, pv, cfg.policy_lr, m[4])?;
        let critic_opt = adam(critic.tensors(), cm, cv, cfg.critic_lr, m[5])?;
        let duals = Tensor::row(duals.into_data());
        let dual_opt = adam(
            std::slice::from_ref(&duals),
            vec![Tensor::row(dm.into_data())],
            vec![Tensor::row(dv.into_data())],
            cfg.dual_lr,
            m[6],
        )?;
        Ok(Self {
            policy: Policy {
                net: policy,
                obs_half: half,
            },
            critic: Critic { net: critic },
            target_policy: Policy {
                net: target_policy,
                obs_half: half,
            },
            target_critic: Critic { net: target_critic },
            policy_opt,
            critic_opt,
            duals,
            dual_opt,
            updates: m[0] as u64,
            seed: (m[1] as u64) | ((m[2] as u64) << 32),
        })
    }
}

/// Runs `episodes` mean-mode episodes with reset seeds `seed, seed + 1, ...`
/// and returns each episode's average per-step reward.
pub fn evaluate(policy: &Policy, env: &mut TaskEnv, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    // Mean mode draws nothing; the generator only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(k as u64));
        let (mut total, mut steps) = (0.0, 0usize);
        loop {
            let a = policy.act(&obs, ActMode::Mean, &mut rng)?;
            let st = env.step(&a)?;
            total += st.reward;
            steps += 1;
            obs = st.obs;
            if st.done {
                break;
            }
        }
        out.push(total / steps as f64);
    }
    Ok(out)
}

/// Rebuilds an MLP from `[W0, b0, W1, b1, ...]`.
pub(crate) fn mlp_from(tensors: Vec<Tensor>) -> Result<MlpParams> {
    if tensors.is_empty() || tensors.len() % 2 != 0 {
        return Err(Error::Malformed(format!(
            "{} tensors do not form an MLP",
            tensors.len()
        )));
    }
    let mut sizes = vec![tensors[0].dims2().0];
    for w in tensors.iter().step_by(2) {
        sizes.push(w.dims2().1);
    }
    MlpParams::new(sizes, tensors).map_err(|e| Error::Malformed(e.to_string()))
}

impl Policy {
    /// `[meta(obs_half), W0, b0, ...]`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut v = vec![Tensor::row(vec![self.obs_half])];
        v.extend_from_slice(self.net.tensors());
        v
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.is_empty() || tensors[0].len() != 1 {
            return Err(Error::Malformed(
                "policy file lacks its header tensor".into(),
            ));
        }
        let half = tensors.remove(0).data()[0];
        let net = mlp_from(tensors)?;
        if net.output_width() != 2 * crate::boxsim::NUM_VALVES {
            return Err(Error::Malformed(format!(
                "policy emits {} values",
                net.output_width()
            )));
        }
        Ok(Self {
            net,
            obs_half: half,
        })
    }
}
