use crate::error::{Error, Result};
use crate::kv::{self, Entry};

/// Number of bottom nozzles (and valves).
pub const NUM_VALVES: usize = 9;

/// Physical and sensing constants of the simulated box. Lengths in metres,
/// speeds in m/s, times in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub width: f64,
    pub height: f64,
    pub ball_radius: f64,
    pub ball_mass: f64,
    pub gravity: f64,
    pub control_rate_hz: f64,
    pub substeps: usize,
    pub episode_len: usize,
    pub reset_steps: usize,
    pub n_balls: usize,
    /// Peak exit speed of a jet at full drive.
    pub u0_max: f64,
    pub k_spread: f64,
    pub sigma0: f64,
    /// Virtual origin of the centreline decay.
    pub y0: f64,
    /// Shared-supply coupling constant.
    pub kappa: f64,
    pub k_entrain: f64,
    /// Quadratic drag constant (kg/m): force = c_d |u_rel| u_rel.
    pub drag_coeff: f64,
    pub restitution: f64,
    pub ou_theta: f64,
    /// Turbulent fluctuation amplitude as a fraction of the local air speed.
    pub ou_sigma_frac: f64,
    pub pixel_grid: usize,
    pub pixel_noise: f64,
    pub history_len: usize,
    pub nozzle_gains: [f64; NUM_VALVES],
}

/// Drag constant obtained from [`super::calibrate_drag`] for the default
/// geometry: one valve commanded fully open holds a ball at
/// [`DEFAULT_HOVER_HEIGHT`].
pub const DEFAULT_DRAG_COEFF: f64 = 0.007_771_359_374_999_906;
pub const DEFAULT_HOVER_HEIGHT: f64 = 0.60;

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 0.70,
            height: 0.70,
            ball_radius: 0.020,
            ball_mass: 0.0027,
            gravity: 9.81,
            control_rate_hz: 20.0,
            substeps: 10,
            episode_len: 1000,
            reset_steps: 40,
            n_balls: 3,
            u0_max: 72.0,
            k_spread: 0.1,
            sigma0: 0.02,
            y0: 0.05,
            kappa: 2.0,
            k_entrain: 0.15,
            drag_coeff: DEFAULT_DRAG_COEFF,
            restitution: 0.5,
            ou_theta: 5.0,
            ou_sigma_frac: 0.2,
            pixel_grid: 700,
            pixel_noise: 1.0,
            history_len: 4,
            nozzle_gains: [1.0; NUM_VALVES],
        }
    }
}

pub(crate) const SIM_KEYS: &[&str] = &[
    "width",
    "height",
    "ball_radius",
    "ball_mass",
    "gravity",
    "control_rate_hz",
    "substeps",
    "episode_len",
    "reset_steps",
    "n_balls",
    "u0_max",
    "k_spread",
    "sigma0",
    "y0",
    "kappa",
    "k_entrain",
    "drag_coeff",
    "restitution",
    "ou_theta",
    "ou_sigma_frac",
    "pixel_grid",
    "pixel_noise",
    "history_len",
    "nozzle_gains",
];

impl SimConfig {
    /// Parses a `key = value` file; keys absent from the file keep their
    /// defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            cfg.set(&e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one entry. Returns [`Error::UnknownKey`] for keys outside
    /// the simulator's key list.
    pub fn set(&mut self, e: &Entry) -> Result<()> {
        let f = || kv::parse_f64(e);
        let u = || kv::parse_usize(e);
        match e.key.as_str() {
            "width" => self.width = f()?,
            "height" => self.height = f()?,
            "ball_radius" => self.ball_radius = f()?,
            "ball_mass" => self.ball_mass = f()?,
            "gravity" => self.gravity = f()?,
            "control_rate_hz" => self.control_rate_hz = f()?,
            "substeps" => self.substeps = u()?,
            "episode_len" => self.episode_len = u()?,
            "reset_steps" => self.reset_steps = u()?,
            "n_balls" => self.n_balls = u()?,
            "u0_max" => self.u0_max = f()?,
            "k_spread" => self.k_spread = f()?,
            "sigma0" => self.sigma0 = f()?,
            "y0" => self.y0 = f()?,
            "kappa" => self.kappa = f()?,
            "k_entrain" => self.k_entrain = f()?,
            "drag_coeff" => self.drag_coeff = f()?,
            "restitution" => self.restitution = f()?,
            "ou_theta" => self.ou_theta = f()?,
            "ou_sigma_frac" => self.ou_sigma_frac = f()?,
            "pixel_grid" => self.pixel_grid = u()?,
            "pixel_noise" => self.pixel_noise = f()?,
            "history_len" => self.history_len = u()?,
            "nozzle_gains" => {
                let gains = kv::parse_f64_list(e)?;
                if gains.len() != NUM_VALVES {
                    return Err(Error::Config(format!(
                        "line {}: nozzle_gains needs {NUM_VALVES} values, got {}",
                        e.line,
                        gains.len()
                    )));
                }
                self.nozzle_gains.copy_from_slice(&gains);
            }
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("height", self.height),
            ("ball_radius", self.ball_radius),
            ("ball_mass", self.ball_mass),
            ("gravity", self.gravity),
            ("control_rate_hz", self.control_rate_hz),
            ("u0_max", self.u0_max),
            ("k_spread", self.k_spread),
            ("sigma0", self.sigma0),
            ("y0", self.y0),
            ("drag_coeff", self.drag_coeff),
            ("restitution", self.restitution),
            ("ou_theta", self.ou_theta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "`{name}` must be strictly positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("kappa", self.kappa),
            ("k_entrain", self.k_entrain),
            ("ou_sigma_frac", self.ou_sigma_frac),
            ("pixel_noise", self.pixel_noise),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "`{name}` must be non-negative, got {v}"
                )));
            }
        }
        if self.restitution > 1.0 {
            return Err(Error::Config("`restitution` must not exceed 1".into()));
        }
        if self.substeps == 0
            || self.episode_len == 0
            || self.history_len == 0
            || self.pixel_grid < 2
        {
            return Err(Error::Config(
                "substeps, episode_len, history_len and pixel_grid must be positive".into(),
            ));
        }
        if !(1..=3).contains(&self.n_balls) {
            return Err(Error::Config(format!(
                "n_balls must be 1, 2 or 3, got {}",
                self.n_balls
            )));
        }
        if 2.0 * self.ball_radius * self.n_balls as f64 >= self.width
            || 2.0 * self.ball_radius >= self.height
        {
            return Err(Error::Config("balls do not fit in the box".into()));
        }
        if self
            .nozzle_gains
            .iter()
            .any(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return Err(Error::Config(
                "nozzle gains must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Nozzle centres, evenly spaced across the floor.
    pub fn nozzle_x(&self) -> [f64; NUM_VALVES] {
        std::array::from_fn(|i| (i as f64 + 0.5) * self.width / NUM_VALVES as f64)
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    /// Pixels per metre (uniform, identical on both axes for a square box).
    pub fn pixel_scale(&self) -> f64 {
        (self.pixel_grid - 1) as f64 / self.width
    }

    pub fn radius_px(&self) -> f64 {
        self.ball_radius * self.pixel_scale()
    }

    /// Largest valid pixel coordinate.
    pub fn pixel_max(&self) -> f64 {
        (self.pixel_grid - 1) as f64
    }

    /// Full resolved configuration in the file format.
    pub fn to_kv_string(&self, prefix: &str) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(&format!("{prefix}{k} = {v}\n"));
        };
        put("width", kv::fmt_f64(self.width));
        put("height", kv::fmt_f64(self.height));
        put("ball_radius", kv::fmt_f64(self.ball_radius));
        put("ball_mass", kv::fmt_f64(self.ball_mass));
        put("gravity", kv::fmt_f64(self.gravity));
        put("control_rate_hz", kv::fmt_f64(self.control_rate_hz));
        put("substeps", self.substeps.to_string());
        put("episode_len", self.episode_len.to_string());
        put("reset_steps", self.reset_steps.to_string());
        put("n_balls", self.n_balls.to_string());
        put("u0_max", kv::fmt_f64(self.u0_max));
        put("k_spread", kv::fmt_f64(self.k_spread));
        put("sigma0", kv::fmt_f64(self.sigma0));
        put("y0", kv::fmt_f64(self.y0));
        put("kappa", kv::fmt_f64(self.kappa));
        put("k_entrain", kv::fmt_f64(self.k_entrain));
        put("drag_coeff", kv::fmt_f64(self.drag_coeff));
        put("restitution", kv::fmt_f64(self.restitution));
        put("ou_theta", kv::fmt_f64(self.ou_theta));
        put("ou_sigma_frac", kv::fmt_f64(self.ou_sigma_frac));
        put("pixel_grid", self.pixel_grid.to_string());
        put("pixel_noise", kv::fmt_f64(self.pixel_noise));
        put("history_len", self.history_len.to_string());
        put(
            "nozzle_gains",
            self.nozzle_gains
                .iter()
                .map(|g| kv::fmt_f64(*g))
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SimConfig::default();
        c.validate().unwrap();
        assert_eq!(c.episode_len as f64 / c.control_rate_hz, 50.0);
        let xs = c.nozzle_x();
        assert!(xs.iter().all(|&x| x > 0.0 && x < c.width));
        assert!((xs[4] - c.width / 2.0).abs() < 1e-15);
    }

    #[test]
    fn parse_overrides_and_rejects_unknown_keys() {
        let c = SimConfig::parse("kappa = 0\npixel_noise = 0.0\n").unwrap();
        assert_eq!(c.kappa, 0.0);
        assert_eq!(c.pixel_noise, 0.0);
        assert!(
            matches!(SimConfig::parse("warp_drive = 1\n"), Err(Error::UnknownKey(k)) if k == "warp_drive")
        );
        assert!(matches!(
            SimConfig::parse("gravity = -1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SimConfig::parse("nozzle_gains = 1,1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = SimConfig::default();
        c.nozzle_gains[8] = 0.75;
        c.u0_max = 1.0 / 3.0;
        let back = SimConfig::parse(&c.to_kv_string("")).unwrap();
        assert_eq!(back, c);
    }
}
