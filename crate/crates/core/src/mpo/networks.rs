use rand::Rng;
use rand_distr::StandardNormal;

use crate::boxsim::{Action, NUM_VALVES};
use crate::error::{Error, Result};
use crate::tensor::{
    mlp_forward, mlp_graph, Graph, MlpParams, Tensor, Var, LOG_STD_MAX, LOG_STD_MIN,
};

/// Raw pre-activation that maps to `log_std = 0` through the bounded head.
pub const UNIT_STD_RAW: f64 = 0.916_290_731_874_155;

/// How [`Policy::act`] turns the Gaussian into an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

pub fn squash(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Inverse of [`squash`] with the argument kept inside `[1e-6, 1 - 1e-6]`.
pub fn unsquash(a: f64) -> f64 {
    let a = a.clamp(1e-6, 1.0 - 1e-6);
    (a / (1.0 - a)).ln()
}

/// Maps pixel coordinates onto `[-1, 1]`.
pub fn normalize_obs(obs: &Tensor, half: f64) -> Tensor {
    obs.map(|p| p / half - 1.0)
}

/// Bounded log standard deviation head.
pub fn log_std_from_raw(raw: f64) -> f64 {
    LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * squash(raw)
}

/// Gaussian policy over pre-squash actions: the network emits nine means
/// followed by nine raw scale outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub net: MlpParams,
    pub obs_half: f64,
}

impl Policy {
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        obs_half: f64,
        rng: &mut R,
    ) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain([2 * NUM_VALVES])
            .collect();
        let mut net = MlpParams::init(&sizes, 0.01, rng);
        let last = net.num_layers() - 1;
        for b in &mut net.bias_mut(last).data_mut()[NUM_VALVES..] {
            *b = UNIT_STD_RAW;
        }
        Self { net, obs_half }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_width()
    }

    /// Per-row means and log standard deviations for raw pixel observations.
    pub fn distribution(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = mlp_forward(&self.net, &normalize_obs(obs, self.obs_half))?;
        split_head(&out)
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActMode, rng: &mut R) -> Result<Action> {
        let (mean, log_std) = self.distribution(&Tensor::row(obs.to_vec()))?;
        let mut a = [0.0; NUM_VALVES];
        for (d, slot) in a.iter_mut().enumerate() {
            let z = match mode {
                ActMode::Mean => mean.data()[d],
                ActMode::Sample => {
                    mean.data()[d] + log_std.data()[d].exp() * rng.sample::<f64, _>(StandardNormal)
                }
            };
            *slot = squash(z);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy action".into()));
        }
        Ok(a)
    }
}

pub(crate) fn split_head(out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = out.dims2();
    if cols != 2 * NUM_VALVES {
        return Err(Error::shape(format!("policy head has {cols} outputs")));
    }
    let mut mean = Vec::with_capacity(rows * NUM_VALVES);
    let mut log_std = Vec::with_capacity(rows * NUM_VALVES);
    for r in 0..rows {
        let row = out.row_slice(r);
        mean.extend_from_slice(&row[..NUM_VALVES]);
        log_std.extend(row[NUM_VALVES..].iter().map(|&v| log_std_from_raw(v)));
    }
    Ok((
        Tensor::matrix(rows, NUM_VALVES, mean)?,
        Tensor::matrix(rows, NUM_VALVES, log_std)?,
    ))
}

/// Records the policy head on `g` for normalized observations `x`.
pub(crate) fn policy_graph(
    g: &mut Graph,
    net: &MlpParams,
    vars: &[Var],
    x: Var,
) -> Result<(Var, Var)> {
    let out = mlp_graph(g, net.sizes(), vars, x)?;
    let mean = g.slice_cols(out, 0, NUM_VALVES)?;
    let raw = g.slice_cols(out, NUM_VALVES, 2 * NUM_VALVES)?;
    let s = g.sigmoid(raw);
    let s = g.scale(s, LOG_STD_MAX - LOG_STD_MIN);
    let log_std = g.offset(s, LOG_STD_MIN);
    Ok((mean, log_std))
}

/// `n` pre-squash draws per row, rows repeated consecutively.
pub(crate) fn sample_pre_squash<R: Rng + ?Sized>(
    mean: &Tensor,
    log_std: &Tensor,
    n: usize,
    rng: &mut R,
) -> Tensor {
    let (rows, d) = mean.dims2();
    let mut z = Vec::with_capacity(rows * n * d);
    for r in 0..rows {
        let (m, s) = (mean.row_slice(r), log_std.row_slice(r));
        for _ in 0..n {
            for k in 0..d {
                z.push(m[k] + s[k].exp() * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    Tensor {
        shape: vec![rows * n, d],
        data: z,
    }
}

/// Q-network over normalized observations and actions rescaled to
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: MlpParams,
}

impl Critic {
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim + NUM_VALVES)
            .chain(hidden.iter().copied())
            .chain([1])
            .collect();
        Self {
            net: MlpParams::init(&sizes, 1.0, rng),
        }
    }

    /// Q values for normalized observations (`rows x d`) paired with
    /// actions in `[0, 1]` (`rows x 9`).
    pub fn q(&self, obs_norm: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        Ok(mlp_forward(&self.net, &critic_input(obs_norm, actions)?)?.into_data())
    }
}

/// `[obs_norm | 2a - 1]`.
pub fn critic_input(obs_norm: &Tensor, actions: &Tensor) -> Result<Tensor> {
    let (rows, d) = obs_norm.dims2();
    let (ra, k) = actions.dims2();
    if rows != ra {
        return Err(Error::shape(format!(
            "critic input: {rows} observations vs {ra} actions"
        )));
    }
    let mut data = Vec::with_capacity(rows * (d + k));
    for r in 0..rows {
        data.extend_from_slice(obs_norm.row_slice(r));
        data.extend(actions.row_slice(r).iter().map(|a| 2.0 * a - 1.0));
    }
    Tensor::matrix(rows, d + k, data)
}

/// Repeats each row of `t` `n` times consecutively.
pub(crate) fn repeat_rows(t: &Tensor, n: usize) -> Tensor {
    let (rows, c) = t.dims2();
    let mut data = Vec::with_capacity(rows * n * c);
    for r in 0..rows {
        for _ in 0..n {
            data.extend_from_slice(t.row_slice(r));
        }
    }
    Tensor {
        shape: vec![rows * n, c],
        data,
    }
}
