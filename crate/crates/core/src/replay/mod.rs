//! Replay storage for online learning, `BOFL` episode logs and reward
//! relabeling.

mod log;

use rand::Rng;

use crate::boxsim::NUM_VALVES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use log::{
    read_log, relabel, write_log, EpisodeLog, LogHeader, LogWriter, LOG_MAGIC, LOG_VERSION,
};

/// One environment step, stored in single precision exactly as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: [f32; NUM_VALVES],
    pub reward: f32,
    pub next_obs: Vec<f32>,
    /// Set on the last step of an episode.
    pub done: bool,
    /// Ground-truth ball pixels after the step, the configuration `reward`
    /// was computed from.
    pub pixels: Vec<f32>,
    pub episode: u32,
    pub step: u32,
}

impl Transition {
    /// Goal pixel carried in the observation tail of goal-conditioned tasks.
    pub fn goal(&self) -> Option<[f64; 2]> {
        let n = self.obs.len();
        (n >= 2).then(|| [self.obs[n - 2] as f64, self.obs[n - 1] as f64])
    }
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stores `t`, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        if i >= self.items.len() {
            return None;
        }
        let start = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        Some(&self.items[(start + i) % self.capacity])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |i| self.get(i).unwrap())
    }

    /// `n` storage slots drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < n || self.items.is_empty() {
            return Err(Error::InsufficientData(format!(
                "replay holds {} transitions, batch needs {n}",
                self.items.len()
            )));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    /// Copies of `n` uniformly drawn transitions.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }

    /// Dense learner batch of `n` uniformly drawn transitions.
    pub fn sample_dense<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        Batch::from_refs(&idx.iter().map(|&i| &self.items[i]).collect::<Vec<_>>())
    }

    /// Everything currently stored, oldest first.
    pub fn to_vec(&self) -> Vec<Transition> {
        self.iter().cloned().collect()
    }
}

/// Row-stacked transitions in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Tensor,
    pub action: Tensor,
    pub reward: Vec<f64>,
    pub next_obs: Tensor,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_refs(ts: &[&Transition]) -> Result<Self> {
        let Some(first) = ts.first() else {
            return Err(Error::InsufficientData("empty batch".into()));
        };
        let d = first.obs.len();
        let n = ts.len();
        let mut obs = Vec::with_capacity(n * d);
        let mut next = Vec::with_capacity(n * d);
        let mut act = Vec::with_capacity(n * NUM_VALVES);
        for t in ts {
            if t.obs.len() != d || t.next_obs.len() != d {
                return Err(Error::shape(format!(
                    "batch mixes observation widths {d} and {}",
                    t.obs.len()
                )));
            }
            obs.extend(t.obs.iter().map(|&v| v as f64));
            next.extend(t.next_obs.iter().map(|&v| v as f64));
            act.extend(t.action.iter().map(|&v| v as f64));
        }
        Ok(Self {
            obs: Tensor::new(vec![n, d], obs)?,
            action: Tensor::new(vec![n, NUM_VALVES], act)?,
            reward: ts.iter().map(|t| t.reward as f64).collect(),
            next_obs: Tensor::new(vec![n, d], next)?,
            done: ts.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}
