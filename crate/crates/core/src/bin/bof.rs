//! `bof`: train, evaluate, relabel and analyze jet-box agents.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use boxflows::analysis::{
    parse_curve_csv, reach_error_heatmap, render_frames, reward_curve, visit_heatmap,
    Normalization, REACH_BIN_PX, VISIT_BIN_PX,
};
use boxflows::boxsim::BallColor;
use boxflows::harness::{
    evaluate_logged, experiment_keys, load_policy, relabel_log, run_offline, run_online,
    Algorithm, ExperimentConfig,
};
use boxflows::replay::{read_log, write_log, EpisodeLog};
use boxflows::tasks::TaskId;
use boxflows::{Error, Result};

#[derive(Parser)]
#[command(name = "bof", version, about = "Jet-box reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::new(TaskId::Hover),
        };
        for s in &self.set {
            cfg.set_str(s)?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Online MPO run: episodes, log, checkpoints and CSV curves.
    Train(ConfigArgs),
    /// Offline CRR on a logged dataset.
    TrainOffline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// BOFL log to learn from.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Mean-mode evaluation of a saved policy.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Policy file (`policy_*.bofp`).
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Also write the evaluation episodes as a BOFL log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Recompute the rewards of a log for another task.
    Relabel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Task whose reward replaces the logged one.
        #[arg(long)]
        task: String,
        /// Experiment file supplying simulator and task parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Figures from logs and curves.
    #[command(subcommand)]
    Analyze(Analyze),
    /// List every configuration key.
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Max,
    Minmax,
}

impl From<Norm> for Normalization {
    fn from(n: Norm) -> Self {
        match n {
            Norm::Max => Normalization::Max,
            Norm::Minmax => Normalization::MinMax,
        }
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Visitation heatmap of one ball over the last episodes.
    Visits {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        /// Output stem; `.ppm` and `.csv` are written.
        #[arg(long)]
        out: PathBuf,
        /// Bin width in pixels.
        #[arg(long, default_value_t = VISIT_BIN_PX)]
        bins: f64,
        /// Number of final episodes to include.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value = "orange")]
        color: String,
        #[arg(long, value_enum, default_value_t = Norm::Max)]
        norm: Norm,
    },
    /// Mean reaching error binned by goal position.
    ReachError {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = REACH_BIN_PX)]
        bins: f64,
        #[arg(long, value_enum, default_value_t = Norm::Max)]
        norm: Norm,
    },
    /// Smoothed reward curve (mean and range over runs).
    Curve {
        /// `env_steps,return` CSV per run. Repeatable.
        #[arg(long = "csv", required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Per-step images of one logged episode.
    Frames {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        episode: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        /// Drawn ball radius in pixels.
        #[arg(long, default_value_t = 20.0)]
        radius: f64,
    },
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<EpisodeLog>> {
    paths.iter().map(|p| read_log(p)).collect()
}

fn parent_dir(stem: &Path) -> Result<()> {
    if let Some(d) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            if cfg.algorithm != Algorithm::Mpo {
                return Err(Error::Config(
                    "crr learns from a dataset; use `bof train-offline`".into(),
                ));
            }
            let s = run_online(&cfg)?;
            println!(
                "episodes {} env_steps {} learner_steps {} last_train_return {:.4}",
                s.episodes,
                s.env_steps,
                s.learner_steps,
                s.train_returns.last().copied().unwrap_or(0.0)
            );
            if let Some((step, r)) = s.evals.last() {
                println!("last_eval env_steps {step} return {r:.4}");
            }
            println!("artifacts {}", cfg.out.display());
        }
        Command::TrainOffline { cfg, dataset } => {
            let mut cfg = cfg.resolve()?;
            cfg.algorithm = Algorithm::Crr;
            let s = run_offline(&cfg, &dataset)?;
            println!(
                "dataset {} sha256 {} transitions {}",
                dataset.display(),
                s.dataset_sha256,
                s.transitions
            );
            println!("learner_steps {} (resumed from {})", s.learner_steps, s.resumed_from);
            if let Some(r) = s.evals.last() {
                println!("last_eval learner_steps {} return {:.4}", r.learner_steps, r.mean_return);
            }
            println!("artifacts {}", cfg.out.display());
        }
        Command::Eval {
            cfg,
            policy,
            episodes,
            log,
        } => {
            let cfg = cfg.resolve()?;
            let p = load_policy(&policy)?;
            let mut env = cfg.env()?;
            let (l, returns) = evaluate_logged(&p, &mut env, episodes, cfg.seed)?;
            for (k, r) in returns.iter().enumerate() {
                println!("episode {k} return {r:.6}");
            }
            println!("mean_return {:.6}", mean(&returns));
            if let Some(path) = log {
                parent_dir(&path)?;
                write_log(&path, &l)?;
            }
        }
        Command::Relabel {
            input,
            output,
            task,
            config,
            set,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::new(TaskId::Hover),
            };
            for s in &set {
                cfg.set_str(s)?;
            }
            cfg.task = TaskId::parse(&task)?;
            let log = read_log(&input)?;
            // The box the log was recorded in decides the ball count.
            cfg.set_str(&format!("sim.n_balls = {}", log.header.n_balls))?;
            let out = relabel_log(&log, &cfg.task_spec()?)?;
            parent_dir(&output)?;
            write_log(&output, &out)?;
            let r: Vec<f64> = out.transitions.iter().map(|t| t.reward as f64).collect();
            println!(
                "relabeled {} transitions for {} (mean reward {:.4})",
                r.len(),
                cfg.task,
                mean(&r)
            );
        }
        Command::Analyze(a) => analyze(a)?,
        Command::Keys => {
            for k in experiment_keys() {
                println!("{k}");
            }
        }
    }
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Visits {
            logs,
            out,
            bins,
            episodes,
            color,
            norm,
        } => {
            let h = visit_heatmap(&read_logs(&logs)?, BallColor::parse(&color)?, episodes, bins)?;
            parent_dir(&out)?;
            h.write(&out, norm.into())?;
            println!("{} visits in {}x{} bins", h.total_count(), h.rows, h.cols);
        }
        Analyze::ReachError {
            logs,
            out,
            bins,
            norm,
        } => {
            let h = reach_error_heatmap(&read_logs(&logs)?, bins)?;
            parent_dir(&out)?;
            h.write(&out, norm.into())?;
            println!("{} episodes in {}x{} bins", h.total_count(), h.rows, h.cols);
        }
        Analyze::Curve { csvs, out, window } => {
            let runs = csvs
                .iter()
                .map(|p| parse_curve_csv(&fs::read_to_string(p)?))
                .collect::<Result<Vec<_>>>()?;
            let c = reward_curve(&runs, window)?;
            parent_dir(&out)?;
            fs::write(out.with_extension("csv"), c.to_csv())?;
            fs::write(out.with_extension("ppm"), c.to_ppm(640, 360))?;
            println!("{} points from {} runs", c.steps.len(), runs.len());
        }
        Analyze::Frames {
            log,
            episode,
            out,
            stride,
            radius,
        } => {
            let paths = render_frames(&read_log(&log)?, episode, stride, radius, &out)?;
            println!("{} frames in {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{cat}]: {e}");
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
