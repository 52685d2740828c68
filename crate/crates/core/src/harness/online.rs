use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::mpsc;
use std::thread;

use super::{log_header, run_episode, ExperimentConfig, RunMode, RunSeeds};
use crate::error::{Error, Result};
use crate::kv::fmt_f64;
use crate::mpo::{evaluate, ActMode, LearnerState, Policy, StepStats};
use crate::replay::{LogWriter, ReplayBuffer, Transition};
use crate::tensor::write_checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineSummary {
    pub episodes: usize,
    pub env_steps: u64,
    pub learner_steps: u64,
    /// Average per-step reward of each training episode.
    pub train_returns: Vec<f64>,
    /// `(env_steps, mean evaluation return)` after every evaluation.
    pub evals: Vec<(u64, f64)>,
}

struct Sinks {
    log: LogWriter<BufWriter<File>>,
    train: BufWriter<File>,
    eval: BufWriter<File>,
    learner: BufWriter<File>,
}

/// Online MPO. Each episode runs `sim.episode_len` steps with sampled
/// actions, goes into the replay buffer and the log, and is followed by
/// `round(update_ratio * episode_len)` learner steps. Every
/// `eval_period` episodes the mean-mode policy is evaluated and
/// checkpointed.
///
/// Artifacts in `out`: `config.txt`, `episodes.bofl`, `train.csv`,
/// `eval.csv`, `learner.csv` and `checkpoints/`.
pub fn run_online(cfg: &ExperimentConfig) -> Result<OnlineSummary> {
    cfg.validate()?;
    let mut env = cfg.env()?;
    let episode_len = env.sim().config().episode_len as u64;
    let episodes = (cfg.steps / episode_len) as usize;
    if episodes == 0 {
        return Err(Error::Config(format!(
            "{} steps do not fill one {episode_len}-step episode",
            cfg.steps
        )));
    }
    cfg.prepare_out()?;
    let seeds = RunSeeds::new(cfg.seed);
    let mut learner = LearnerState::new(&cfg.mpo, env.obs_dim(), cfg.obs_half(), seeds.learner)?;
    let mut buffer = ReplayBuffer::new(cfg.mpo.replay_capacity)?;
    let mut eval_env = env.clone();
    let updates_per_episode = (cfg.mpo.update_ratio * episode_len as f64).round() as usize;

    let csv = |name: &str, header: &str| -> Result<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(cfg.out.join(name))?);
        writeln!(w, "{header}")?;
        Ok(w)
    };
    let mut sinks = Sinks {
        log: LogWriter::create(&cfg.out.join("episodes.bofl"), log_header(&env))?,
        train: csv("train.csv", "env_steps,mean_episode_return")?,
        eval: csv("eval.csv", "env_steps,mean_eval_return")?,
        learner: csv(
            "learner.csv",
            "learner_steps,critic_loss,policy_loss,kl_mean,kl_std,eta,alpha_mean,alpha_std,estep_kl,mean_q",
        )?,
    };
    let mut summary = OnlineSummary {
        episodes,
        env_steps: 0,
        learner_steps: 0,
        train_returns: Vec::with_capacity(episodes),
        evals: Vec::new(),
    };

    // After collecting episode `e`: store it, learn, maybe evaluate.
    let mut after_episode = |e: usize,
                             ts: Vec<Transition>,
                             ret: f64,
                             learner: &mut LearnerState|
     -> Result<()> {
        summary.env_steps += ts.len() as u64;
        summary.train_returns.push(ret);
        for t in ts {
            sinks.log.append(&t)?;
            buffer.push(t);
        }
        writeln!(sinks.train, "{},{}", summary.env_steps, fmt_f64(ret))?;
        let mut last: Option<StepStats> = None;
        if buffer.len() >= cfg.mpo.batch_size {
            for _ in 0..updates_per_episode {
                last = Some(learner.learner_step(&cfg.mpo, &buffer)?);
            }
        }
        if let Some(s) = last {
            let v = [
                s.critic_loss,
                s.policy.total,
                s.policy.kl_mean,
                s.policy.kl_std,
                s.eta,
                s.alpha_mean,
                s.alpha_std,
                s.estep_kl,
                s.mean_q,
            ];
            let cols: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
            writeln!(sinks.learner, "{},{}", learner.updates, cols.join(","))?;
        }
        summary.learner_steps = learner.updates;
        if (e + 1) % cfg.eval_period == 0 {
            let r = evaluate(&learner.policy, &mut eval_env, cfg.eval_episodes, seeds.eval)?;
            let mean = if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 };
            writeln!(sinks.eval, "{},{}", summary.env_steps, fmt_f64(mean))?;
            sinks.eval.flush()?;
            summary.evals.push((summary.env_steps, mean));
            let dir = cfg.out.join("checkpoints");
            write_checkpoint(
                dir.join(format!("policy_{:010}.bofp", summary.env_steps)),
                &learner.policy.to_tensors(),
            )?;
            write_checkpoint(dir.join("learner_latest.bofp"), &learner.to_tensors())?;
        }
        Ok(())
    };

    match cfg.mode {
        RunMode::Deterministic => {
            for e in 0..episodes {
                let mut rng = seeds.actor_rng(e as u64);
                let policy = &learner.policy;
                let (ts, ret) = run_episode(&mut env, seeds.env.wrapping_add(e as u64), e as u32, |o| {
                    policy.act(o, ActMode::Sample, &mut rng)
                })?;
                after_episode(e, ts, ret, &mut learner)?;
            }
        }
        RunMode::Threaded => {
            let (policy_tx, policy_rx) = mpsc::channel::<Policy>();
            let (episode_tx, episode_rx) = mpsc::channel::<Result<(Vec<Transition>, f64)>>();
            thread::scope(|scope| -> Result<()> {
                // Owned here so an early error hangs up on the actor.
                let policy_tx = policy_tx;
                let mut actor_env = env.clone();
                scope.spawn(move || {
                    for e in 0..episodes {
                        let Ok(policy) = policy_rx.recv() else { return };
                        let mut rng = seeds.actor_rng(e as u64);
                        let r = run_episode(
                            &mut actor_env,
                            seeds.env.wrapping_add(e as u64),
                            e as u32,
                            |o| policy.act(o, ActMode::Sample, &mut rng),
                        );
                        if episode_tx.send(r).is_err() {
                            return;
                        }
                    }
                });
                policy_tx
                    .send(learner.policy.clone())
                    .map_err(|_| Error::Invalid("actor thread exited".into()))?;
                for e in 0..episodes {
                    let (ts, ret) = episode_rx
                        .recv()
                        .map_err(|_| Error::Invalid("actor thread exited".into()))??;
                    // The actor starts the next episode while we learn.
                    if e + 1 < episodes {
                        let _ = policy_tx.send(learner.policy.clone());
                    }
                    after_episode(e, ts, ret, &mut learner)?;
                }
                drop(policy_tx);
                Ok(())
            })?;
        }
    }

    let dir = cfg.out.join("checkpoints");
    write_checkpoint(dir.join("policy_final.bofp"), &learner.policy.to_tensors())?;
    write_checkpoint(dir.join("learner_final.bofp"), &learner.to_tensors())?;
    sinks.log.finish()?;
    for w in [&mut sinks.train, &mut sinks.eval, &mut sinks.learner] {
        w.flush()?;
    }
    Ok(summary)
}
