//! Experiment orchestration: configuration files, seeding, rollouts and the
//! online / offline training loops behind the `bof` command line.

mod offline;
mod online;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxsim::{Action, SimConfig, Simulator, NUM_VALVES};
use crate::crr::CrrConfig;
use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::mpo::{ActMode, MpoConfig, Policy};
use crate::replay::{relabel, EpisodeLog, LogHeader, Transition};
use crate::tasks::{TaskEnv, TaskId, TaskSpec};
use crate::tensor::read_checkpoint;

pub use crate::seed::seed_split;
pub use offline::{run_offline, OfflineSummary};
pub use online::{run_online, OnlineSummary};

/// Resolved configuration written next to every run's artifacts.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Mpo,
    Crr,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mpo => "mpo",
            Algorithm::Crr => "crr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mpo" => Ok(Algorithm::Mpo),
            "crr" => Ok(Algorithm::Crr),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How the online loop schedules acting and learning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// One thread; artifacts are a pure function of the configuration.
    Deterministic,
    /// An actor thread collects the next episode while the learner trains
    /// on the last one. The actor's policy lags by one episode.
    Threaded,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Deterministic => "deterministic",
            RunMode::Threaded => "threaded",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(RunMode::Deterministic),
            "threaded" => Ok(RunMode::Threaded),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// One experiment. Top-level keys are plain (`task`, `steps`, ...); the
/// simulator, learner and reward parameters sit under the `sim.`, `mpo.`,
/// `crr.` and `task.` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskId,
    pub algorithm: Algorithm,
    /// Environment steps for online runs, learner steps for offline ones.
    pub steps: u64,
    pub seed: u64,
    pub out: PathBuf,
    /// Online runs evaluate after every `eval_period` episodes.
    pub eval_period: usize,
    pub eval_episodes: usize,
    pub mode: RunMode,
    /// Offline runs pick up the latest checkpoint in `out` if one exists.
    pub resume: bool,
    pub sim: SimConfig,
    pub mpo: MpoConfig,
    pub crr: CrrConfig,
    task_entries: Vec<Entry>,
    n_balls_set: bool,
}

const TOP_KEYS: &[&str] = &[
    "task",
    "algorithm",
    "steps",
    "seed",
    "out",
    "eval_period",
    "eval_episodes",
    "mode",
    "resume",
];

impl ExperimentConfig {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            algorithm: Algorithm::Mpo,
            steps: 300_000,
            seed: 0,
            out: PathBuf::from("runs/default"),
            eval_period: 10,
            eval_episodes: 10,
            mode: RunMode::Deterministic,
            resume: false,
            sim: SimConfig::default(),
            mpo: MpoConfig::default(),
            crr: CrrConfig::default(),
            task_entries: Vec::new(),
            n_balls_set: false,
        }
    }

    /// Parses a whole file over the defaults of the task named in it
    /// (hover when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(TaskId::Hover);
        for e in kv::parse(text)? {
            cfg.set(&e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, e: &Entry) -> Result<()> {
        let sub = |prefix: &str| {
            e.key.strip_prefix(prefix).map(|k| Entry {
                key: k.to_string(),
                value: e.value.clone(),
                line: e.line,
            })
        };
        if let Some(s) = sub("sim.") {
            self.n_balls_set |= s.key == "n_balls";
            return self.sim.set(&s);
        }
        if let Some(s) = sub("mpo.") {
            return self.mpo.set(&s);
        }
        if let Some(s) = sub("crr.") {
            return self.crr.set(&s);
        }
        if let Some(s) = sub("task.") {
            // Checked against a throwaway spec now, applied on demand.
            TaskSpec::new(self.task, &self.sim).set(&s)?;
            self.task_entries.retain(|t| t.key != s.key);
            self.task_entries.push(s);
            return Ok(());
        }
        match e.key.as_str() {
            "task" => self.task = TaskId::parse(&e.value)?,
            "algorithm" => self.algorithm = Algorithm::parse(&e.value)?,
            "steps" => self.steps = kv::parse_u64(e)?,
            "seed" => self.seed = kv::parse_u64(e)?,
            "out" => self.out = PathBuf::from(&e.value),
            "eval_period" => self.eval_period = kv::parse_usize(e)?,
            "eval_episodes" => self.eval_episodes = kv::parse_usize(e)?,
            "mode" => self.mode = RunMode::parse(&e.value)?,
            "resume" => self.resume = kv::parse_bool(e)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        for e in kv::parse(assignment)? {
            self.set(&e)?;
        }
        Ok(())
    }

    /// Simulator parameters with the task's ball count filled in unless
    /// the configuration fixed one.
    pub fn sim_config(&self) -> SimConfig {
        let mut s = self.sim.clone();
        if !self.n_balls_set {
            s.n_balls = self.task.default_n_balls();
        }
        s
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let mut spec = TaskSpec::new(self.task, &self.sim_config());
        for e in &self.task_entries {
            spec.set(e)?;
        }
        Ok(spec)
    }

    pub fn env(&self) -> Result<TaskEnv> {
        let sim = Simulator::new(self.sim_config())?;
        TaskEnv::new(sim, self.task_spec()?)
    }

    /// Half the pixel range; observations are centred and scaled by it.
    pub fn obs_half(&self) -> f64 {
        self.sim_config().pixel_max() / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let sim = self.sim_config();
        sim.validate()?;
        self.task_spec()?.validate(sim.n_balls)?;
        self.mpo.validate()?;
        self.crr.validate()?;
        if self.eval_period == 0 {
            return Err(Error::Config("eval_period must be positive".into()));
        }
        Ok(())
    }

    /// Every key but `out` with its resolved value, so that runs in
    /// different directories echo identical files.
    pub fn to_kv_string(&self) -> String {
        let mut s = format!(
            "task = {}\nalgorithm = {}\nsteps = {}\nseed = {}\neval_period = {}\neval_episodes = {}\nmode = {}\nresume = {}\n",
            self.task,
            self.algorithm.name(),
            self.steps,
            self.seed,
            self.eval_period,
            self.eval_episodes,
            self.mode.name(),
            self.resume,
        );
        s += &self.sim_config().to_kv_string("sim.");
        s += &self.mpo.to_kv_string("mpo.");
        s += &self.crr.to_kv_string("crr.");
        if let Ok(spec) = self.task_spec() {
            s += &spec.to_kv_string("task.");
        }
        s
    }

    /// Creates the output directory and writes the resolved configuration.
    pub(crate) fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(self.out.join("checkpoints"))?;
        fs::write(self.out.join(CONFIG_FILE), self.to_kv_string())?;
        Ok(())
    }
}

/// Every key an experiment file accepts.
pub fn experiment_keys() -> Vec<String> {
    let mut keys: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
    for (prefix, list) in [
        ("sim.", crate::boxsim::SIM_KEYS),
        ("mpo.", crate::mpo::MPO_KEYS),
        ("crr.", crate::crr::CRR_KEYS),
        ("task.", crate::tasks::TASK_KEYS),
    ] {
        keys.extend(list.iter().map(|k| format!("{prefix}{k}")));
    }
    keys
}

/// Labeled random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    /// Reset seed of training episode 0; episode `e` uses `env + e`.
    pub env: u64,
    /// Root of the exploration noise; episode `e` uses stream `e`.
    pub actor: u64,
    pub learner: u64,
    /// Reset seed of evaluation episode 0.
    pub eval: u64,
}

impl RunSeeds {
    pub fn new(root: u64) -> Self {
        Self {
            env: seed_split(root, "env"),
            actor: seed_split(root, "actor"),
            learner: seed_split(root, "learner"),
            eval: seed_split(root, "eval"),
        }
    }

    pub fn actor_rng(&self, episode: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.actor);
        rng.set_stream(episode);
        rng
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Plays one episode from reset seed `seed`, choosing actions with
/// `actor`. Transitions carry episode id `episode`. Returns them with the
/// episode's average per-step reward.
pub fn run_episode(
    env: &mut TaskEnv,
    seed: u64,
    episode: u32,
    actor: impl FnMut(&[f64]) -> Result<Action>,
) -> Result<(Vec<Transition>, f64)> {
    let obs = env.reset(seed);
    play(env, obs, episode, actor)
}

/// Finishes the episode `env` is in, starting from observation `obs`.
fn play(
    env: &mut TaskEnv,
    mut obs: Vec<f64>,
    episode: u32,
    mut actor: impl FnMut(&[f64]) -> Result<Action>,
) -> Result<(Vec<Transition>, f64)> {
    let mut out = Vec::with_capacity(env.sim().config().episode_len);
    let mut total = 0.0;
    loop {
        let a = actor(&obs)?;
        let st = env.step(&a)?;
        total += st.reward;
        out.push(Transition {
            obs: to_f32(&obs),
            action: a.map(|v| v as f32),
            reward: st.reward as f32,
            next_obs: to_f32(&st.obs),
            done: st.done,
            pixels: to_f32(&st.pixels),
            episode,
            step: out.len() as u32,
        });
        obs = st.obs;
        if st.done {
            break;
        }
    }
    let mean = total / out.len() as f64;
    Ok((out, mean))
}

pub(crate) fn log_header(env: &TaskEnv) -> LogHeader {
    let c = env.sim().config();
    LogHeader::new(env.spec().id, c.n_balls, c.history_len)
}

/// Mean-mode rollouts of `policy` with reset seeds `seed, seed + 1, ...`,
/// logged. Returns the log and each episode's average reward.
pub fn evaluate_logged(
    policy: &Policy,
    env: &mut TaskEnv,
    episodes: usize,
    seed: u64,
) -> Result<(EpisodeLog, Vec<f64>)> {
    let mut log = EpisodeLog::new(log_header(env));
    let mut returns = Vec::with_capacity(episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..episodes {
        let (ts, r) = run_episode(env, seed.wrapping_add(k as u64), k as u32, |o| {
            policy.act(o, ActMode::Mean, &mut rng)
        })?;
        log.transitions.extend(ts);
        returns.push(r);
    }
    Ok((log, returns))
}

/// Mean-mode rollouts on a goal-conditioned task with the goal of episode
/// `k` set to `goals[k]` right after reset `seed + k`.
pub fn evaluate_with_goals(
    policy: &Policy,
    env: &mut TaskEnv,
    goals: &[[f64; 2]],
    seed: u64,
) -> Result<EpisodeLog> {
    let mut log = EpisodeLog::new(log_header(env));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (k, g) in goals.iter().enumerate() {
        env.reset(seed.wrapping_add(k as u64));
        let obs = env.set_goal(*g)?;
        let (ts, _) = play(env, obs, k as u32, |o| policy.act(o, ActMode::Mean, &mut rng))?;
        log.transitions.extend(ts);
    }
    Ok(log)
}

/// Average rewards of a policy drawing every valve uniformly from `[0, 1]`.
pub fn random_policy_returns(env: &mut TaskEnv, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_split(seed, "random-policy"));
    (0..episodes)
        .map(|k| {
            run_episode(env, seed.wrapping_add(k as u64), k as u32, |_| {
                Ok(std::array::from_fn::<f64, NUM_VALVES, _>(|_| rng.gen()))
            })
            .map(|(_, r)| r)
        })
        .collect()
}

/// Loads a policy file written by a training run.
pub fn load_policy(path: &Path) -> Result<Policy> {
    Policy::from_tensors(read_checkpoint(path)?)
}

/// Recomputes the rewards of `log` for `spec`'s task. The observation
/// layout must not change, so goal-conditioned and plain logs do not mix.
pub fn relabel_log(log: &EpisodeLog, spec: &TaskSpec) -> Result<EpisodeLog> {
    if log.header.task.goal_conditioned() != spec.id.goal_conditioned() {
        return Err(Error::Config(format!(
            "cannot relabel a {} log for {}: goal layouts differ",
            log.header.task, spec.id
        )));
    }
    spec.validate(log.header.n_balls as usize)?;
    let goal_conditioned = spec.id.goal_conditioned();
    let mut out = relabel(log, |t| {
        let px: Vec<f64> = t.pixels.iter().map(|&v| v as f64).collect();
        spec.reward(&px, if goal_conditioned { t.goal() } else { None })
    })?;
    out.header.task = spec.id;
    Ok(out)
}
