//! Surrogate jet-box simulator.
//!
//! Nine nozzles on the floor emit round-jet velocity profiles whose strength
//! drops when several valves share the supply. Balls feel gravity, quadratic
//! drag against the local air velocity (plus an Ornstein-Uhlenbeck turbulent
//! fluctuation) and impulse collisions with the walls and each other. The
//! agent only ever sees noisy pixel coordinates of the balls.

mod config;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(crate) use config::SIM_KEYS;
pub use config::{SimConfig, DEFAULT_DRAG_COEFF, DEFAULT_HOVER_HEIGHT, NUM_VALVES};

use crate::error::{Error, Result};

pub type Action = [f64; NUM_VALVES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BallColor {
    Orange,
    Purple,
    Green,
}

impl BallColor {
    pub const ALL: [BallColor; 3] = [BallColor::Orange, BallColor::Purple, BallColor::Green];

    /// Balls are stored in this order: orange, purple, green.
    pub fn index(self) -> usize {
        match self {
            BallColor::Orange => 0,
            BallColor::Purple => 1,
            BallColor::Green => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BallColor::Orange => "orange",
            BallColor::Purple => "purple",
            BallColor::Green => "green",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "orange" => Ok(BallColor::Orange),
            "purple" => Ok(BallColor::Purple),
            "green" => Ok(BallColor::Green),
            other => Err(Error::Invalid(format!("unknown ball colour `{other}`"))),
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            BallColor::Orange => [255, 140, 0],
            BallColor::Purple => [150, 60, 200],
            BallColor::Green => [40, 190, 70],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ball {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub color: BallColor,
    /// Unit-variance OU state driving the turbulent fluctuation.
    pub ou: [f64; 2],
}

/// Full Markov state of the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub balls: Vec<Ball>,
    pub action: Action,
    /// Control steps taken in the current episode.
    pub step: usize,
    /// Action components that had to be clamped into `[0, 1]`.
    pub clamp_events: u64,
    rng: ChaCha8Rng,
    obs_rng: ChaCha8Rng,
}

/// Per-valve drive levels after supply coupling:
/// `f_i = a_i / (1 + kappa * sum_j a_j)` with actions clamped to `[0, 1]`.
/// Returns the flows and the number of clamped components.
pub fn effective_flows(action: &[f64], kappa: f64) -> Result<(Action, usize)> {
    if action.len() != NUM_VALVES {
        return Err(Error::shape(format!(
            "action has {} components, expected {NUM_VALVES}",
            action.len()
        )));
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(Error::NonFinite("action".into()));
    }
    let mut clamped = 0;
    let a: Action = std::array::from_fn(|i| {
        let v = action[i];
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        v.clamp(0.0, 1.0)
    });
    let total: f64 = a.iter().sum();
    let supply = 1.0 / (1.0 + kappa * total);
    Ok((a.map(|ai| ai * supply), clamped))
}

/// Stateless physics; one instance can drive any number of [`SimState`]s.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: SimConfig,
    nozzle_x: [f64; NUM_VALVES],
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let nozzle_x = config.nozzle_x();
        Ok(Self { config, nozzle_x })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn effective_flows(&self, action: &[f64]) -> Result<(Action, usize)> {
        effective_flows(action, self.config.kappa)
    }

    /// Air velocity at `(x, y)` (metres, `y` up from the floor).
    pub fn air_velocity(&self, x: f64, y: f64, flows: &Action) -> Result<[f64; 2]> {
        let c = &self.config;
        if !(0.0..=c.width).contains(&x) || !(0.0..=c.height).contains(&y) {
            return Err(Error::OutOfBox { x, y });
        }
        Ok(self.air_velocity_inside(x, y, flows))
    }

    fn air_velocity_inside(&self, x: f64, y: f64, flows: &Action) -> [f64; 2] {
        let c = &self.config;
        let decay = c.y0 / (y + c.y0);
        let sigma = c.sigma0 + c.k_spread * y;
        let inv_two_var = 1.0 / (2.0 * sigma * sigma);
        let (mut ux, mut uy) = (0.0, 0.0);
        for i in 0..NUM_VALVES {
            let f = flows[i] * c.nozzle_gains[i];
            if f == 0.0 {
                continue;
            }
            let dx = x - self.nozzle_x[i];
            let v = c.u0_max * f * decay * (-dx * dx * inv_two_var).exp();
            uy += v;
            ux += v * dx / (y + c.y0) * c.k_entrain;
        }
        [ux, uy]
    }

    /// Balls at rest on the floor at random non-overlapping positions, then
    /// `reset_steps` control steps of random valve bursts, then valves off.
    pub fn reset(&self, seed: u64) -> SimState {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let r = c.ball_radius;
        let mut xs: Vec<f64> = Vec::with_capacity(c.n_balls);
        while xs.len() < c.n_balls {
            let x = rng.gen_range(r..=c.width - r);
            if xs.iter().all(|&o| (o - x).abs() >= 2.0 * r + 1e-6) {
                xs.push(x);
            }
        }
        let balls = xs
            .iter()
            .zip(BallColor::ALL)
            .map(|(&x, color)| Ball {
                pos: [x, r],
                vel: [0.0, 0.0],
                color,
                ou: [0.0, 0.0],
            })
            .collect();
        let mut state = SimState {
            balls,
            action: [0.0; NUM_VALVES],
            step: 0,
            clamp_events: 0,
            rng,
            obs_rng,
        };

        let mut pattern = [0.0; NUM_VALVES];
        for k in 0..c.reset_steps {
            if k % 5 == 0 {
                for p in pattern.iter_mut() {
                    *p = if state.rng.gen_bool(0.35) {
                        state.rng.gen_range(0.3..=1.0)
                    } else {
                        0.0
                    };
                }
            }
            self.advance(&mut state, &pattern)
                .expect("reset bursts stay finite");
        }
        state.action = [0.0; NUM_VALVES];
        state.step = 0;
        state
    }

    /// One control step. Returns the ground-truth pixels afterwards.
    pub fn step(&self, state: &mut SimState, action: &[f64]) -> Result<Vec<f64>> {
        if state.step >= self.config.episode_len {
            return Err(Error::Invalid(format!(
                "episode already has {} steps (limit {})",
                state.step, self.config.episode_len
            )));
        }
        self.advance(state, action)?;
        Ok(self.ground_truth_pixels(state))
    }

    fn advance(&self, state: &mut SimState, action: &[f64]) -> Result<()> {
        let (flows, clamped) = self.effective_flows(action)?;
        state.clamp_events += clamped as u64;
        state.action = std::array::from_fn(|i| action[i].clamp(0.0, 1.0));

        let c = &self.config;
        let dt = c.control_dt() / c.substeps as f64;
        let ou_decay = (-c.ou_theta * dt).exp();
        let ou_kick = (1.0 - ou_decay * ou_decay).sqrt();
        let drag = c.drag_coeff / c.ball_mass;
        for k in 0..c.substeps {
            for b in state.balls.iter_mut() {
                let x = b.pos[0].clamp(0.0, c.width);
                let y = b.pos[1].clamp(0.0, c.height);
                let u = self.air_velocity_inside(x, y, &flows);
                let speed = u[0].hypot(u[1]);
                for d in 0..2 {
                    let z: f64 = state.rng.sample(StandardNormal);
                    b.ou[d] = b.ou[d] * ou_decay + ou_kick * z;
                }
                let rel = [
                    u[0] + c.ou_sigma_frac * speed * b.ou[0] - b.vel[0],
                    u[1] + c.ou_sigma_frac * speed * b.ou[1] - b.vel[1],
                ];
                // Drag is linearised around the current relative speed and
                // taken implicitly, which keeps stiff drag stable.
                let kd = drag * rel[0].hypot(rel[1]) * dt;
                let target = [b.vel[0] + rel[0], b.vel[1] + rel[1]];
                b.vel[0] = (b.vel[0] + kd * target[0]) / (1.0 + kd);
                b.vel[1] = (b.vel[1] + kd * target[1] - c.gravity * dt) / (1.0 + kd);
                b.pos[0] += b.vel[0] * dt;
                b.pos[1] += b.vel[1] * dt;
                if !(b.pos.iter().chain(&b.vel).all(|v| v.is_finite())) {
                    return Err(Error::Integration {
                        substep: state.step * c.substeps + k,
                    });
                }
            }
            self.resolve_contacts(&mut state.balls, dt);
        }
        state.step += 1;
        Ok(())
    }

    fn clamp_to_walls(&self, b: &mut Ball, rest_speed: f64) {
        let c = &self.config;
        let r = c.ball_radius;
        let e = c.restitution;
        let bounds = [(r, c.width - r), (r, c.height - r)];
        for (d, &(lo, hi)) in bounds.iter().enumerate() {
            let into_wall = if b.pos[d] < lo {
                b.pos[d] = lo;
                b.vel[d] < 0.0
            } else if b.pos[d] > hi {
                b.pos[d] = hi;
                b.vel[d] > 0.0
            } else {
                false
            };
            if into_wall {
                b.vel[d] = if b.vel[d].abs() < rest_speed {
                    0.0
                } else {
                    -e * b.vel[d]
                };
            }
        }
    }

    fn resolve_contacts(&self, balls: &mut [Ball], dt: f64) {
        let c = &self.config;
        let rest_speed = 2.0 * c.gravity * dt;
        let min_dist = 2.0 * c.ball_radius;
        for b in balls.iter_mut() {
            self.clamp_to_walls(b, rest_speed);
        }
        for _ in 0..100 {
            let mut overlap_found = false;
            for i in 0..balls.len() {
                for j in i + 1..balls.len() {
                    let d = [
                        balls[i].pos[0] - balls[j].pos[0],
                        balls[i].pos[1] - balls[j].pos[1],
                    ];
                    let dist = d[0].hypot(d[1]);
                    if dist >= min_dist {
                        continue;
                    }
                    overlap_found = true;
                    let n = if dist > 1e-12 {
                        [d[0] / dist, d[1] / dist]
                    } else {
                        [1.0, 0.0]
                    };
                    let push = 0.5 * (min_dist - dist) + 1e-12;
                    for k in 0..2 {
                        balls[i].pos[k] += push * n[k];
                        balls[j].pos[k] -= push * n[k];
                    }
                    let vn = (balls[i].vel[0] - balls[j].vel[0]) * n[0]
                        + (balls[i].vel[1] - balls[j].vel[1]) * n[1];
                    if vn < 0.0 {
                        let impulse = -(1.0 + c.restitution) * vn / 2.0;
                        for k in 0..2 {
                            balls[i].vel[k] += impulse * n[k];
                            balls[j].vel[k] -= impulse * n[k];
                        }
                    }
                }
            }
            for b in balls.iter_mut() {
                self.clamp_to_walls(b, rest_speed);
            }
            if !overlap_found {
                break;
            }
        }
    }

    /// Exact pixel image of the ball centres, `[x0, y0, x1, y1, ...]`;
    /// origin top-left, `y` growing downward.
    pub fn ground_truth_pixels(&self, state: &SimState) -> Vec<f64> {
        let s = self.config.pixel_scale();
        let h = self.config.height;
        state
            .balls
            .iter()
            .flat_map(|b| [b.pos[0] * s, (h - b.pos[1]) * s])
            .collect()
    }

    /// Noisy pixel frame appended to `history`; returns the stacked
    /// observation.
    pub fn observe(&self, state: &mut SimState, history: &mut PixelHistory) -> Observation {
        let max = self.config.pixel_max();
        let sigma = self.config.pixel_noise;
        let frame: Vec<f64> = self
            .ground_truth_pixels(state)
            .into_iter()
            .map(|p| {
                let noise: f64 = if sigma > 0.0 {
                    sigma * state.obs_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (p + noise).clamp(0.0, max)
            })
            .collect();
        history.push(frame);
        history.observation(None)
    }
}

/// The last `H` pixel frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelHistory {
    frames: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl PixelHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            frames: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// The first frame of an episode fills every slot.
    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.is_empty() {
            for _ in 1..self.capacity {
                self.frames.push_back(frame.clone());
            }
        } else if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn observation(&self, goal: Option<[f64; 2]>) -> Observation {
        Observation {
            frames: self.frames.iter().flatten().copied().collect(),
            goal,
        }
    }
}

/// What the agent sees: stacked pixel frames and, for goal-conditioned
/// tasks, the goal pixel. No flow or valve information.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frames: Vec<f64>,
    pub goal: Option<[f64; 2]>,
}

impl Observation {
    pub fn with_goal(mut self, goal: Option<[f64; 2]>) -> Self {
        self.goal = goal;
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len() + if self.goal.is_some() { 2 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.frames.clone();
        if let Some(g) = self.goal {
            v.extend_from_slice(&g);
        }
        v
    }
}

/// Bisects the drag constant so that a noise-free ball released on the
/// centreline of a single fully commanded valve settles at `target_height`.
pub fn calibrate_drag(base: &SimConfig, target_height: f64) -> Result<f64> {
    let settle = |drag: f64| -> Result<f64> {
        let mut cfg = base.clone();
        cfg.drag_coeff = drag;
        cfg.ou_sigma_frac = 0.0;
        cfg.n_balls = 1;
        cfg.episode_len = usize::MAX;
        let sim = Simulator::new(cfg)?;
        let mut state = sim.reset(0);
        let x = sim.nozzle_x[NUM_VALVES / 2];
        state.balls[0] = Ball {
            pos: [x, target_height],
            vel: [0.0, 0.0],
            color: BallColor::Orange,
            ou: [0.0; 2],
        };
        let mut action = [0.0; NUM_VALVES];
        action[NUM_VALVES / 2] = 1.0;
        for _ in 0..400 {
            sim.advance(&mut state, &action)?;
        }
        Ok(state.balls[0].pos[1])
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    if settle(hi)? < target_height {
        return Err(Error::Invalid(format!(
            "no drag constant below {hi} reaches {target_height} m"
        )));
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if settle(mid)? < target_height {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
