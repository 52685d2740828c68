use super::networks::{normalize_obs, policy_graph, Critic, Policy};
use crate::error::{Error, Result};
use crate::tensor::{mlp_graph, Graph, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `r + γ (1 - done) q_next`.
pub fn td_targets(reward: &[f64], done: &[bool], next_q: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if reward.len() != done.len() || reward.len() != next_q.len() {
        return Err(Error::shape(
            "td_targets: reward, done and next_q lengths differ",
        ));
    }
    Ok(reward
        .iter()
        .zip(done)
        .zip(next_q)
        .map(|((&r, &d), &q)| r + if d { 0.0 } else { gamma * q })
        .collect())
}

/// Mean squared TD error of `critic` against fixed `targets`, with its
/// gradient. `critic_in` rows are `[obs_norm | 2a - 1]`.
pub fn critic_loss(
    critic: &Critic,
    critic_in: &Tensor,
    targets: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    let rows = critic_in.rows();
    if rows == 0 {
        return Err(Error::InsufficientData(
            "critic loss on an empty batch".into(),
        ));
    }
    if targets.len() != rows {
        return Err(Error::shape(format!(
            "{rows} critic inputs vs {} targets",
            targets.len()
        )));
    }
    let y = Tensor::matrix(rows, 1, targets.to_vec())?;
    let sizes = critic.net.sizes().to_vec();
    crate::tensor::grad(critic.net.tensors(), |g, vars| {
        let x = g.constant(critic_in.clone());
        let q = mlp_graph(g, &sizes, vars, x)?;
        let y = g.constant(y);
        let err = g.sub(q, y)?;
        let sq = g.square(err);
        Ok(g.mean(sq))
    })
}

/// Per-state softmax of `q / eta`; `q` holds `n` consecutive values per
/// state.
pub fn estep_weights(q: &[f64], n: usize, eta: f64) -> Result<Vec<f64>> {
    check_groups(q.len(), n)?;
    let mut w = Vec::with_capacity(q.len());
    for group in q.chunks_exact(n) {
        let m = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = w.len();
        w.extend(group.iter().map(|&v| ((v - m) / eta).exp()));
        let z: f64 = w[start..].iter().sum();
        w[start..].iter_mut().for_each(|v| *v /= z);
    }
    Ok(w)
}

fn check_groups(len: usize, n: usize) -> Result<()> {
    if n == 0 || len == 0 || len % n != 0 {
        return Err(Error::shape(format!(
            "{len} values do not split into groups of {n}"
        )));
    }
    Ok(())
}

/// `log mean_j exp(q_j / eta)` per state, computed stably.
fn log_mean_exp(group: &[f64], eta: f64) -> f64 {
    let m = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = group.iter().map(|&v| ((v - m) / eta).exp()).sum();
    m / eta + (s / group.len() as f64).ln()
}

/// Mean over states of `KL(w || uniform)`.
pub fn kl_to_uniform(weights: &[f64], n: usize) -> Result<f64> {
    check_groups(weights.len(), n)?;
    let states = weights.len() / n;
    let ln_n = (n as f64).ln();
    let total: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * (w.ln() + ln_n))
        .sum();
    Ok(total / states as f64)
}

/// `g(η) = η ε + η mean_s log mean_j exp(Q_sj / η)`.
pub fn temperature_dual(q: &[f64], n: usize, eta: f64, eps: f64) -> Result<f64> {
    check_groups(q.len(), n)?;
    let states = (q.len() / n) as f64;
    let lme: f64 = q.chunks_exact(n).map(|g| log_mean_exp(g, eta)).sum::<f64>() / states;
    Ok(eta * eps + eta * lme)
}

/// `dg/dη`, which equals `ε - mean_s KL(w_s || uniform)`.
pub fn temperature_dual_grad(q: &[f64], n: usize, eta: f64, eps: f64) -> Result<f64> {
    let w = estep_weights(q, n, eta)?;
    Ok(eps - kl_to_uniform(&w, n)?)
}

/// One projected gradient step on the temperature dual.
pub fn temperature_dual_step(q: &[f64], n: usize, eta: f64, eps: f64, lr: f64) -> Result<f64> {
    let g = temperature_dual_grad(q, n, eta, eps)?;
    Ok((eta - lr * g).max(super::ETA_MIN))
}

/// Values of the M-step objective's parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyLoss {
    pub total: f64,
    /// Weighted negative log-likelihood of the sampled actions.
    pub nll: f64,
    /// Mean over states of `KL(π_old || π)` with π's covariance replaced by
    /// π_old's.
    pub kl_mean: f64,
    /// Mean over states of `KL(π_old || π)` with π's mean replaced by
    /// π_old's.
    pub kl_std: f64,
}

/// Records `-mean_s Σ_j w_sj log N(z_sj; mean_s, exp(log_std_s))` on `g`.
/// `z` has `n` consecutive rows per state.
pub(crate) fn weighted_nll(
    g: &mut Graph,
    mean: Var,
    log_std: Var,
    z: &Tensor,
    w: &[f64],
    n: usize,
) -> Result<Var> {
    let states = g.value(mean).rows();
    if z.rows() != states * n || w.len() != z.rows() {
        return Err(Error::shape(format!(
            "{states} states x {n} samples vs {} actions and {} weights",
            z.rows(),
            w.len()
        )));
    }
    let (m, ls) = if n == 1 {
        (mean, log_std)
    } else {
        (g.repeat_rows(mean, n), g.repeat_rows(log_std, n))
    };
    let zc = g.constant(z.clone());
    let diff = g.sub(zc, m)?;
    let sq = g.square(diff);
    let neg2ls = g.scale(ls, -2.0);
    let inv_var = g.exp(neg2ls);
    let quad = g.mul(sq, inv_var)?;
    let quad = g.scale(quad, 0.5);
    let per_dim = g.add(quad, ls)?;
    let per_dim = g.offset(per_dim, HALF_LN_2PI);
    let nll_rows = g.sum_cols(per_dim);
    let wc = g.constant(Tensor::matrix(w.len(), 1, w.to_vec())?);
    let weighted = g.mul(nll_rows, wc)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / states as f64))
}

/// M-step loss: weighted likelihood of the E-step samples plus
/// `alpha_mean · KL_mean + alpha_std · KL_std` toward the frozen policy
/// (`old_mean`, `old_log_std` per state). Returns the parts and the
/// gradient with respect to the policy network.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    policy: &Policy,
    obs: &Tensor,
    z: &Tensor,
    weights: &[f64],
    n: usize,
    old_mean: &Tensor,
    old_log_std: &Tensor,
    alpha_mean: f64,
    alpha_std: f64,
) -> Result<(PolicyLoss, Vec<Tensor>)> {
    let states = obs.rows();
    if old_mean.dims2() != old_log_std.dims2() || old_mean.rows() != states {
        return Err(Error::shape(
            "policy_loss: frozen policy does not match the batch",
        ));
    }
    let x = normalize_obs(obs, policy.obs_half);
    let mut parts = PolicyLoss {
        total: 0.0,
        nll: 0.0,
        kl_mean: 0.0,
        kl_std: 0.0,
    };
    let (total, grads) = crate::tensor::grad(policy.net.tensors(), |g, vars| {
        let xv = g.constant(x);
        let (mean, log_std) = policy_graph(g, &policy.net, vars, xv)?;
        let nll = weighted_nll(g, mean, log_std, z, weights, n)?;
        let inv = 1.0 / states as f64;

        // KL(N(μo, σo) || N(μ, σo)) = Σ (μ - μo)² / (2 σo²)
        let mo = g.constant(old_mean.clone());
        let d = g.sub(mean, mo)?;
        let d2 = g.square(d);
        let half_prec = g.constant(old_log_std.map(|l| 0.5 * (-2.0 * l).exp()));
        let klm = g.mul(d2, half_prec)?;
        let klm = g.sum(klm);
        let klm = g.scale(klm, inv);

        // KL(N(μo, σo) || N(μo, σ)) = Σ log σ - log σo + σo² / (2 σ²) - 1/2
        let lo = g.constant(old_log_std.clone());
        let dl = g.sub(log_std, lo)?;
        let neg2dl = g.scale(dl, -2.0);
        let ratio = g.exp(neg2dl);
        let ratio = g.scale(ratio, 0.5);
        let kls = g.add(dl, ratio)?;
        let kls = g.offset(kls, -0.5);
        let kls = g.sum(kls);
        let kls = g.scale(kls, inv);

        parts.nll = g.scalar(nll);
        parts.kl_mean = g.scalar(klm);
        parts.kl_std = g.scalar(kls);
        let pm = g.scale(klm, alpha_mean);
        let ps = g.scale(kls, alpha_std);
        let t = g.add(nll, pm)?;
        g.add(t, ps)
    })?;
    parts.total = total;
    Ok((parts, grads))
}
