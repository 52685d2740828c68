//! Reward functions and goal sampling for the box tasks.
//!
//! All rewards read ground-truth ball pixels laid out as
//! `[x_orange, y_orange, x_purple, y_purple, x_green, y_green]` (truncated
//! to the number of balls), image convention: `y` grows downward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxsim::{BallColor, PixelHistory, SimConfig, SimState, Simulator};
use crate::error::{Error, Result};
use crate::kv::{self, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    Hover = 0,
    Rearrange = 1,
    Stack = 2,
    Reach = 3,
    HoverCenter = 4,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Hover,
        TaskId::Rearrange,
        TaskId::Stack,
        TaskId::Reach,
        TaskId::HoverCenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Hover => "hover",
            TaskId::Rearrange => "rearrange",
            TaskId::Stack => "stack",
            TaskId::Reach => "reach",
            TaskId::HoverCenter => "hover-center",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task `{s}` (expected hover, rearrange, stack, reach or hover-center)"
                ))
            })
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or_else(|| Error::Malformed(format!("unknown task id {code}")))
    }

    /// Whether the goal pixel is appended to the observation.
    pub fn goal_conditioned(self) -> bool {
        self == TaskId::Reach
    }

    /// Balls in the box for this task unless the configuration says
    /// otherwise. Reaching moves a single ball.
    pub fn default_n_balls(self) -> usize {
        match self {
            TaskId::Reach => 1,
            _ => 3,
        }
    }

    /// Smallest ball count the reward can be evaluated on.
    pub fn min_balls(self) -> usize {
        match self {
            TaskId::Rearrange | TaskId::Stack => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reward parameters for one task, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Ball whose height / position is rewarded in hover, reach and
    /// hover-center.
    pub target: BallColor,
    /// Ball radius in pixels; the reachable centre range is
    /// `[radius_px, pixel_max - radius_px]`.
    pub radius_px: f64,
    pub pixel_max: f64,
    /// Image width used by the rearrange proximity law and the centre line.
    pub width_px: f64,
    pub stack_offset: f64,
    pub stack_sigma_h: f64,
    pub stack_sigma_a: f64,
    pub episode_len: usize,
}

pub(crate) const TASK_KEYS: &[&str] = &[
    "target",
    "stack_offset",
    "stack_sigma_h",
    "stack_sigma_a",
    "width_px",
];

impl TaskSpec {
    pub fn new(id: TaskId, sim: &SimConfig) -> Self {
        Self {
            id,
            target: BallColor::Orange,
            radius_px: sim.radius_px(),
            pixel_max: sim.pixel_max(),
            width_px: sim.pixel_grid as f64,
            stack_offset: 40.0,
            stack_sigma_h: 20.0,
            stack_sigma_a: 20.0,
            episode_len: sim.episode_len,
        }
    }

    pub fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "target" => self.target = BallColor::parse(&e.value)?,
            "stack_offset" => self.stack_offset = kv::parse_f64(e)?,
            "stack_sigma_h" => self.stack_sigma_h = kv::parse_f64(e)?,
            "stack_sigma_a" => self.stack_sigma_a = kv::parse_f64(e)?,
            "width_px" => self.width_px = kv::parse_f64(e)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self, n_balls: usize) -> Result<()> {
        if n_balls < self.id.min_balls() {
            return Err(Error::Config(format!(
                "task {} needs at least {} balls, got {n_balls}",
                self.id,
                self.id.min_balls()
            )));
        }
        if self.target.index() >= n_balls {
            return Err(Error::Config(format!(
                "target ball {} is not in a {n_balls}-ball box",
                self.target.name()
            )));
        }
        if !(self.stack_sigma_h > 0.0 && self.stack_sigma_a > 0.0 && self.width_px > 0.0) {
            return Err(Error::Config(
                "stack kernel widths and width_px must be positive".into(),
            ));
        }
        if !(self.pixel_max > 2.0 * self.radius_px) {
            return Err(Error::Config("ball does not fit in the image".into()));
        }
        Ok(())
    }

    pub fn to_kv_string(&self, prefix: &str) -> String {
        format!(
            "{prefix}target = {}\n{prefix}stack_offset = {}\n{prefix}stack_sigma_h = {}\n{prefix}stack_sigma_a = {}\n{prefix}width_px = {}\n",
            self.target.name(),
            kv::fmt_f64(self.stack_offset),
            kv::fmt_f64(self.stack_sigma_h),
            kv::fmt_f64(self.stack_sigma_a),
            kv::fmt_f64(self.width_px),
        )
    }

    /// Observation width for `n_balls` balls and `history` frames.
    pub fn obs_dim(&self, n_balls: usize, history: usize) -> usize {
        2 * n_balls * history + if self.id.goal_conditioned() { 2 } else { 0 }
    }

    fn y_bounds(&self) -> (f64, f64) {
        (self.radius_px, self.pixel_max - self.radius_px)
    }

    /// Per-step reward from ground-truth pixels.
    pub fn reward(&self, pixels: &[f64], goal: Option<[f64; 2]>) -> Result<f64> {
        let need = 2 * self.id.min_balls().max(self.target.index() + 1);
        if pixels.len() < need || pixels.len() % 2 != 0 {
            return Err(Error::shape(format!(
                "task {} needs {need} pixel values, got {}",
                self.id,
                pixels.len()
            )));
        }
        let ball = |c: BallColor| [pixels[2 * c.index()], pixels[2 * c.index() + 1]];
        let target = ball(self.target);
        let (y_min, y_max) = self.y_bounds();
        Ok(match self.id {
            TaskId::Hover => hover_reward(target[1], y_min, y_max),
            TaskId::HoverCenter => hover_center_reward(target, y_min, y_max, self.width_px),
            TaskId::Rearrange => rearrange_reward(
                ball(BallColor::Orange)[0],
                ball(BallColor::Purple)[0],
                self.width_px,
            ),
            TaskId::Stack => stack_reward(
                ball(BallColor::Orange),
                ball(BallColor::Purple),
                self.stack_offset,
                self.stack_sigma_h,
                self.stack_sigma_a,
            ),
            TaskId::Reach => {
                let g =
                    goal.ok_or_else(|| Error::Invalid("reach reward needs a goal pixel".into()))?;
                reach_reward(target, g, self.width_px)
            }
        })
    }

    /// Uniform goal over the reachable interior.
    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let (lo, hi) = self.y_bounds();
        [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
    }
}

/// One task on one simulator: resets, steps and assembles observations.
#[derive(Clone, Debug)]
pub struct TaskEnv {
    sim: Simulator,
    spec: TaskSpec,
    state: SimState,
    history: PixelHistory,
    goal: Option<[f64; 2]>,
    obs: Vec<f64>,
}

/// Result of one [`TaskEnv::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Ground-truth pixels after the step.
    pub pixels: Vec<f64>,
}

impl TaskEnv {
    pub fn new(sim: Simulator, spec: TaskSpec) -> Result<Self> {
        spec.validate(sim.config().n_balls)?;
        let state = sim.reset(0);
        let history = PixelHistory::new(sim.config().history_len);
        Ok(Self {
            sim,
            spec,
            state,
            history,
            goal: None,
            obs: Vec::new(),
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn goal(&self) -> Option<[f64; 2]> {
        self.goal
    }

    pub fn obs_dim(&self) -> usize {
        self.spec
            .obs_dim(self.sim.config().n_balls, self.sim.config().history_len)
    }

    /// New episode from `seed`; goal-conditioned tasks draw their goal from
    /// the same seed. Returns the first observation.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.state = self.sim.reset(seed);
        self.goal = self.spec.id.goal_conditioned().then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            self.spec.sample_goal(&mut rng)
        });
        self.history.clear();
        self.obs = self
            .sim
            .observe(&mut self.state, &mut self.history)
            .with_goal(self.goal)
            .to_vec();
        self.obs.clone()
    }

    /// Replaces the goal of the running episode (goal-conditioned tasks
    /// only) and returns the updated observation.
    pub fn set_goal(&mut self, goal: [f64; 2]) -> Result<Vec<f64>> {
        if !self.spec.id.goal_conditioned() {
            return Err(Error::Invalid(format!("task {} has no goal", self.spec.id)));
        }
        if !(goal[0].is_finite() && goal[1].is_finite()) {
            return Err(Error::NonFinite("goal pixel".into()));
        }
        self.goal = Some(goal);
        let n = self.obs.len();
        self.obs[n - 2..].copy_from_slice(&goal);
        Ok(self.obs.clone())
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let pixels = self.sim.step(&mut self.state, action)?;
        let reward = self.spec.reward(&pixels, self.goal)?;
        self.obs = self
            .sim
            .observe(&mut self.state, &mut self.history)
            .with_goal(self.goal)
            .to_vec();
        Ok(EnvStep {
            obs: self.obs.clone(),
            reward,
            done: self.state.step >= self.sim.config().episode_len,
            pixels,
        })
    }
}

/// Linear in the target's pixel height: 1 at the top extreme, 0 at the
/// bottom one.
pub fn hover_reward(y: f64, y_min: f64, y_max: f64) -> f64 {
    ((y_max - y) / (y_max - y_min)).clamp(0.0, 1.0)
}

pub fn hover_center_reward(p: [f64; 2], y_min: f64, y_max: f64, width_px: f64) -> f64 {
    let half = width_px / 2.0;
    let centre = (1.0 - (p[0] - half).abs() / half).clamp(0.0, 1.0);
    hover_reward(p[1], y_min, y_max) * centre
}

/// Orange belongs in the right half, purple in the left; a ball outside
/// its half loses reward linearly with its distance to the centre line.
pub fn rearrange_reward(x_orange: f64, x_purple: f64, width_px: f64) -> f64 {
    let half = width_px / 2.0;
    let r_o = if x_orange >= half {
        1.0
    } else {
        1.0 - (half - x_orange) / width_px
    };
    let r_p = if x_purple <= half {
        1.0
    } else {
        1.0 - (x_purple - half) / width_px
    };
    (r_o.clamp(0.0, 1.0)) * (r_p.clamp(0.0, 1.0))
}

/// Orange should sit `offset` pixels above purple, horizontally aligned.
pub fn stack_reward(
    orange: [f64; 2],
    purple: [f64; 2],
    offset: f64,
    sigma_h: f64,
    sigma_a: f64,
) -> f64 {
    let gap = purple[1] - orange[1] - offset;
    let dx = orange[0] - purple[0];
    let r_h = (-gap * gap / (2.0 * sigma_h * sigma_h)).exp();
    let r_a = (-dx * dx / (2.0 * sigma_a * sigma_a)).exp();
    r_h * r_a
}

pub fn reach_reward(p: [f64; 2], goal: [f64; 2], width_px: f64) -> f64 {
    let d = (p[0] - goal[0]).hypot(p[1] - goal[1]);
    (1.0 - d / (width_px * std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(id: TaskId) -> TaskSpec {
        TaskSpec::new(id, &SimConfig::default())
    }

    #[test]
    fn names_and_codes_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(TaskId::parse(t.name()).unwrap(), t);
            assert_eq!(TaskId::from_code(t.code()).unwrap(), t);
        }
        assert!(TaskId::parse("juggle").is_err());
        assert!(TaskId::from_code(9).is_err());
    }

    #[test]
    fn hover_extremes_and_midpoint() {
        let s = spec(TaskId::Hover);
        let (lo, hi) = (s.radius_px, s.pixel_max - s.radius_px);
        let px = |y: f64| vec![100.0, y, 5.0, 5.0, 600.0, 600.0];
        assert_eq!(s.reward(&px(lo), None).unwrap(), 1.0);
        assert_eq!(s.reward(&px(hi), None).unwrap(), 0.0);
        assert!((s.reward(&px(0.5 * (lo + hi)), None).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hover_ignores_distractors() {
        let s = spec(TaskId::Hover);
        let a = s
            .reward(&[100.0, 200.0, 5.0, 5.0, 600.0, 600.0], None)
            .unwrap();
        let b = s
            .reward(&[100.0, 200.0, 300.0, 690.0, 20.0, 20.0], None)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rearrange_examples() {
        let s = spec(TaskId::Rearrange);
        let r = |xo: f64, xp: f64| {
            s.reward(&[xo, 600.0, xp, 600.0, 350.0, 100.0], None)
                .unwrap()
        };
        assert_eq!(r(500.0, 100.0), 1.0);
        assert!((r(0.0, 100.0) - 0.5).abs() < 1e-12);
        assert!((r(0.0, 700.0) - 0.25).abs() < 1e-12);
        assert_eq!(r(350.0, 350.0), 1.0);
    }

    #[test]
    fn stack_examples() {
        let s = spec(TaskId::Stack);
        let r = |o: [f64; 2], p: [f64; 2]| s.reward(&[o[0], o[1], p[0], p[1]], None).unwrap();
        assert_eq!(r([200.0, 560.0], [200.0, 600.0]), 1.0);
        assert!((r([200.0, 540.0], [200.0, 600.0]) - (-0.5f64).exp()).abs() < 1e-12);
        let side = r([240.0, 600.0], [200.0, 600.0]);
        let expected = (-1600.0f64 / 800.0).exp() * (-1600.0f64 / 800.0).exp();
        assert!((side - expected).abs() < 1e-15);
        assert!(side < 0.21 * 0.14);
    }

    #[test]
    fn reach_examples() {
        let s = spec(TaskId::Reach);
        assert_eq!(
            s.reward(&[300.0, 300.0], Some([300.0, 300.0])).unwrap(),
            1.0
        );
        assert_eq!(reach_reward([0.0, 0.0], [700.0, 700.0], 700.0), 0.0);
        assert!(
            (s.reward(&[100.0, 100.0], Some([160.0, 180.0])).unwrap()
                - (1.0 - 100.0 / 989.949_493_661_166_5))
                .abs()
                < 1e-12
        );
        assert!(s.reward(&[100.0, 100.0], None).is_err());
    }

    #[test]
    fn hover_center_examples() {
        let s = spec(TaskId::HoverCenter);
        let (lo, hi) = (s.radius_px, s.pixel_max - s.radius_px);
        assert_eq!(s.reward(&[350.0, lo], None).unwrap(), 1.0);
        assert_eq!(s.reward(&[0.0, lo], None).unwrap(), 0.0);
        assert_eq!(s.reward(&[700.0, lo], None).unwrap(), 0.0);
        assert!((s.reward(&[525.0, 0.5 * (lo + hi)], None).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn short_pixel_vectors_are_rejected() {
        assert!(spec(TaskId::Stack).reward(&[1.0, 2.0], None).is_err());
        assert!(spec(TaskId::Hover).reward(&[1.0], None).is_err());
    }

    #[test]
    fn goals_are_seeded_in_bounds_and_centred() {
        let s = spec(TaskId::Reach);
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(s.sample_goal(&mut a), s.sample_goal(&mut b));
        let (lo, hi) = (s.radius_px, s.pixel_max - s.radius_px);
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let g = s.sample_goal(&mut a);
            assert!(g.iter().all(|v| (lo..=hi).contains(v)));
            mean[0] += g[0] / n as f64;
            mean[1] += g[1] / n as f64;
        }
        for m in mean {
            assert!((m - 349.5).abs() < 0.01 * 349.5, "{m}");
        }
    }

    #[test]
    fn goal_can_be_placed_by_hand() {
        let sc = SimConfig {
            n_balls: 1,
            reset_steps: 2,
            ..SimConfig::default()
        };
        let sim = Simulator::new(sc.clone()).unwrap();
        let mut env = TaskEnv::new(sim.clone(), TaskSpec::new(TaskId::Reach, &sc)).unwrap();
        let obs = env.reset(5);
        let moved = env.set_goal([100.0, 600.0]).unwrap();
        assert_eq!(moved[..obs.len() - 2], obs[..obs.len() - 2]);
        assert_eq!(moved[obs.len() - 2..], [100.0, 600.0]);
        let st = env.step(&[0.0; 9]).unwrap();
        assert_eq!(st.obs[st.obs.len() - 2..], [100.0, 600.0]);
        let p = [st.pixels[0], st.pixels[1]];
        assert_eq!(st.reward, reach_reward(p, [100.0, 600.0], 700.0));
        let sc3 = SimConfig { reset_steps: 2, ..SimConfig::default() };
        let mut hover = TaskEnv::new(Simulator::new(sc3.clone()).unwrap(), TaskSpec::new(TaskId::Hover, &sc3)).unwrap();
        hover.reset(1);
        assert!(hover.set_goal([1.0, 1.0]).is_err());
    }

    #[test]
    fn layout_validation() {
        let s = spec(TaskId::Rearrange);
        assert!(s.validate(1).is_err());
        s.validate(2).unwrap();
        let mut h = spec(TaskId::Hover);
        h.target = BallColor::Green;
        assert!(h.validate(2).is_err());
        assert_eq!(spec(TaskId::Reach).obs_dim(1, 4), 10);
        assert_eq!(spec(TaskId::Hover).obs_dim(3, 4), 24);
    }

    fn pixel() -> impl Strategy<Value = f64> {
        0.0f64..=699.0
    }

    proptest! {
        #[test]
        fn rewards_stay_in_unit_interval(px in proptest::collection::vec(pixel(), 6), g in proptest::array::uniform2(pixel())) {
            for id in TaskId::ALL {
                let r = spec(id).reward(&px, Some(g)).unwrap();
                prop_assert!((0.0..=1.0).contains(&r), "{} -> {}", id, r);
            }
        }

        #[test]
        fn hover_strictly_decreasing(y1 in 20.0f64..679.0, dy in 0.01f64..10.0) {
            let s = spec(TaskId::Hover);
            let y2 = (y1 + dy).min(s.pixel_max - s.radius_px);
            prop_assume!(y2 > y1);
            let r1 = s.reward(&[0.0, y1], None).unwrap();
            let r2 = s.reward(&[0.0, y2], None).unwrap();
            prop_assert!(r2 < r1);
        }

        #[test]
        fn rearrange_is_one_iff_both_inside(xo in pixel(), xp in pixel()) {
            let r = rearrange_reward(xo, xp, 700.0);
            prop_assert_eq!(r == 1.0, xo >= 350.0 && xp <= 350.0);
        }

        #[test]
        fn stack_translation_invariant(o in proptest::array::uniform2(pixel()), p in proptest::array::uniform2(pixel()), t in -100.0f64..100.0) {
            let a = stack_reward(o, p, 40.0, 20.0, 20.0);
            let b = stack_reward([o[0] + t, o[1]], [p[0] + t, p[1]], 40.0, 20.0, 20.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn reach_depends_on_distance_only(p in proptest::array::uniform2(pixel()), g in proptest::array::uniform2(pixel()), theta in 0.0f64..6.283) {
            let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
            let (c, s) = (theta.cos(), theta.sin());
            let q = [g[0] + c * dx - s * dy, g[1] + s * dx + c * dy];
            prop_assert!((reach_reward(p, g, 700.0) - reach_reward(q, g, 700.0)).abs() < 1e-12);
        }

        #[test]
        fn centre_factor_never_raises_hover(p in proptest::array::uniform2(pixel())) {
            let h = spec(TaskId::Hover).reward(&p, None).unwrap();
            let c = spec(TaskId::HoverCenter).reward(&p, None).unwrap();
            prop_assert!(c <= h);
        }
    }
}
