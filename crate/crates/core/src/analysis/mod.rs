//! Figures from episode logs: visitation and reaching-error heatmaps,
//! smoothed reward curves and per-step frames. Every image is a binary
//! PPM written next to a CSV holding the same numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::boxsim::BallColor;
use crate::error::{Error, Result};
use crate::replay::{EpisodeLog, Transition};

/// Side of the square pixel space covered by the maps.
pub const EXTENT_PX: f64 = 700.0;
pub const VISIT_BIN_PX: f64 = 35.0;
pub const REACH_BIN_PX: f64 = 80.0;
/// Steps at the end of an episode that enter the reaching error.
pub const REACH_TAIL_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the largest bin.
    Max,
    /// Smallest bin maps to 0 (black), largest to 1 (red).
    MinMax,
}

/// Square grid of bins over `[0, extent)^2`, row index from the pixel y.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub bin_px: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major accumulated values.
    pub values: Vec<f64>,
    /// Row-major number of contributions.
    pub counts: Vec<u64>,
}

impl Heatmap {
    pub fn new(bin_px: f64, extent: f64) -> Result<Self> {
        if !(bin_px > 0.0 && extent > 0.0 && bin_px.is_finite() && extent.is_finite()) {
            return Err(Error::Invalid(format!("bin size {bin_px} over extent {extent}")));
        }
        let n = (extent / bin_px).ceil() as usize;
        Ok(Self {
            bin_px,
            rows: n,
            cols: n,
            values: vec![0.0; n * n],
            counts: vec![0; n * n],
        })
    }

    /// Bin of a pixel. Edges belong to the higher bin; coordinates outside
    /// the grid are clamped onto it.
    pub fn bin_of(&self, x: f64, y: f64) -> (usize, usize) {
        let idx = |v: f64, n: usize| ((v / self.bin_px).floor().max(0.0) as usize).min(n - 1);
        (idx(y, self.rows), idx(x, self.cols))
    }

    pub fn add(&mut self, x: f64, y: f64, value: f64) {
        let (r, c) = self.bin_of(x, y);
        self.values[r * self.cols + c] += value;
        self.counts[r * self.cols + c] += 1;
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Values mapped into `[0, 1]`; an all-equal map becomes all zeros.
    pub fn normalized(&self, mode: Normalization) -> Vec<f64> {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = match mode {
            Normalization::Max => 0.0,
            Normalization::MinMax => self.values.iter().copied().fold(f64::INFINITY, f64::min),
        };
        let span = max - min;
        self.values
            .iter()
            .map(|v| if span > 0.0 { ((v - min) / span).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }

    /// Per-bin mean of the contributions (zero for empty bins).
    pub fn count_normalized(&self) -> Heatmap {
        let mut h = self.clone();
        for (v, &n) in h.values.iter_mut().zip(&self.counts) {
            *v = if n > 0 { *v / n as f64 } else { 0.0 };
        }
        h
    }

    /// `row,col,x0,y0,value,count,intensity` per bin.
    pub fn to_csv(&self, mode: Normalization) -> String {
        let norm = self.normalized(mode);
        let mut s = String::from("row,col,x0,y0,value,count,intensity\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                let _ = writeln!(
                    s,
                    "{r},{c},{},{},{},{},{}",
                    c as f64 * self.bin_px,
                    r as f64 * self.bin_px,
                    self.values[i],
                    self.counts[i],
                    norm[i]
                );
            }
        }
        s
    }

    /// Black-to-red image, `scale` pixels per bin side.
    pub fn to_ppm(&self, mode: Normalization, scale: usize) -> Vec<u8> {
        let norm = self.normalized(mode);
        let scale = scale.max(1);
        let mut img = Image::new(self.cols * scale, self.rows * scale);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let red = (norm[r * self.cols + c] * 255.0).round() as u8;
                for y in r * scale..(r + 1) * scale {
                    for x in c * scale..(c + 1) * scale {
                        img.put(x as i64, y as i64, [red, 0, 0]);
                    }
                }
            }
        }
        img.to_ppm()
    }

    /// Writes `<stem>.ppm` and `<stem>.csv`.
    pub fn write(&self, stem: &Path, mode: Normalization) -> Result<()> {
        fs::write(stem.with_extension("ppm"), self.to_ppm(mode, 10))?;
        fs::write(stem.with_extension("csv"), self.to_csv(mode))?;
        Ok(())
    }
}

/// Episodes of several logs in order: `(log index, episode id)`.
fn all_episodes(logs: &[EpisodeLog]) -> Vec<(usize, u32)> {
    logs.iter()
        .enumerate()
        .flat_map(|(i, l)| l.episode_ids().into_iter().map(move |e| (i, e)))
        .collect()
}

fn ball_pixel(t: &Transition, idx: usize) -> Result<[f64; 2]> {
    match (t.pixels.get(2 * idx), t.pixels.get(2 * idx + 1)) {
        (Some(&x), Some(&y)) => Ok([x as f64, y as f64]),
        _ => Err(Error::InsufficientData(format!(
            "transition carries {} balls, ball {idx} requested",
            t.pixels.len() / 2
        ))),
    }
}

/// Visits of `color` over the last `last_k` episodes of `logs`, one count
/// per logged step.
pub fn visit_heatmap(logs: &[EpisodeLog], color: BallColor, last_k: usize, bin_px: f64) -> Result<Heatmap> {
    for l in logs {
        if color.index() >= l.header.n_balls as usize {
            return Err(Error::InsufficientData(format!(
                "log holds {} balls; no {} ball",
                l.header.n_balls,
                color.name()
            )));
        }
    }
    let eps = all_episodes(logs);
    if last_k == 0 || last_k > eps.len() {
        return Err(Error::InsufficientData(format!(
            "{last_k} episodes requested, {} available",
            eps.len()
        )));
    }
    let mut h = Heatmap::new(bin_px, EXTENT_PX)?;
    for &(li, id) in &eps[eps.len() - last_k..] {
        for t in logs[li].episode(id) {
            let [x, y] = ball_pixel(t, color.index())?;
            h.add(x, y, 1.0);
        }
    }
    Ok(h)
}

/// Mean ball-to-goal distance over the last [`REACH_TAIL_STEPS`] steps of
/// one episode (all steps if the episode is shorter).
pub fn episode_reach_error(steps: &[&Transition], ball: usize) -> Result<(f64, [f64; 2])> {
    let goal = steps
        .first()
        .and_then(|t| t.goal())
        .ok_or_else(|| Error::InsufficientData("episode has no goal".into()))?;
    let mut sorted: Vec<&Transition> = steps.to_vec();
    sorted.sort_by_key(|t| t.step);
    let tail = &sorted[sorted.len().saturating_sub(REACH_TAIL_STEPS)..];
    let mut sum = 0.0;
    for t in tail {
        let [x, y] = ball_pixel(t, ball)?;
        sum += (x - goal[0]).hypot(y - goal[1]);
    }
    Ok((sum / tail.len() as f64, goal))
}

/// Cumulative reaching error binned by each episode's goal. `counts` holds
/// episodes per bin; [`Heatmap::count_normalized`] gives the mean variant.
pub fn reach_error_heatmap(logs: &[EpisodeLog], bin_px: f64) -> Result<Heatmap> {
    let mut h = Heatmap::new(bin_px, EXTENT_PX)?;
    for l in logs {
        if !l.header.task.goal_conditioned() {
            return Err(Error::InsufficientData(format!(
                "task {} carries no goals",
                l.header.task
            )));
        }
        for id in l.episode_ids() {
            let (err, goal) = episode_reach_error(&l.episode(id), 0)?;
            h.add(goal[0], goal[1], err);
        }
    }
    Ok(h)
}

/// Parses `env_steps,<value>[,...]` rows after a header line. Reports the
/// 1-based line of the first malformed row.
pub fn parse_curve_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut num = || -> Result<f64> {
            cols.next()
                .and_then(|c| c.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Malformed(format!("line {}: expected two numeric columns, got `{line}`", i + 1)))
        };
        let step = num()?;
        let value = num()?;
        out.push((step, value));
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("curve file has no rows".into()));
    }
    Ok(out)
}

/// Trailing moving average: element `i` is the mean of the last `window`
/// values up to `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Smooths each run and reduces across runs point by point (truncated to
/// the shortest run).
pub fn reward_curve(runs: &[Vec<(f64, f64)>], window: usize) -> Result<Curve> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::InsufficientData("no curve rows".into()));
    }
    let smoothed: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| moving_average(&r[..len].iter().map(|p| p.1).collect::<Vec<_>>(), window))
        .collect();
    let mut c = Curve {
        steps: runs[0][..len].iter().map(|p| p.0).collect(),
        mean: Vec::with_capacity(len),
        min: Vec::with_capacity(len),
        max: Vec::with_capacity(len),
    };
    for i in 0..len {
        let col = smoothed.iter().map(|s| s[i]);
        c.mean.push(col.clone().sum::<f64>() / smoothed.len() as f64);
        c.min.push(col.clone().fold(f64::INFINITY, f64::min));
        c.max.push(col.fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(c)
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("env_steps,mean,min,max\n");
        for i in 0..self.steps.len() {
            let _ = writeln!(s, "{},{},{},{}", self.steps[i], self.mean[i], self.min[i], self.max[i]);
        }
        s
    }

    /// Line plot: mean in white over a grey min/max band.
    pub fn to_ppm(&self, width: usize, height: usize) -> Vec<u8> {
        let mut img = Image::new(width, height);
        let lo = self.min.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = self.steps.len();
        let to_y = |v: f64| ((1.0 - (v - lo) / span) * (height - 1) as f64).round() as i64;
        for i in 0..n {
            let x = if n > 1 { (i * (width - 1) / (n - 1)) as i64 } else { 0 };
            for y in to_y(self.max[i])..=to_y(self.min[i]) {
                img.put(x, y, [90, 90, 90]);
            }
            img.put(x, to_y(self.mean[i]), [255, 255, 255]);
        }
        img.to_ppm()
    }
}

/// RGB raster with clipped drawing.
#[derive(Clone, Debug)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn disc(&mut self, cx: f64, cy: f64, r: f64, c: [u8; 3]) {
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    self.put(x, y, c);
                }
            }
        }
    }

    pub fn cross(&mut self, cx: f64, cy: f64, half: i64, c: [u8; 3]) {
        let (x, y) = (cx.round() as i64, cy.round() as i64);
        for d in -half..=half {
            self.put(x + d, y, c);
            self.put(x, y + d, c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

pub fn ball_rgb(c: BallColor) -> [u8; 3] {
    match c {
        BallColor::Orange => [255, 140, 0],
        BallColor::Purple => [150, 60, 200],
        BallColor::Green => [40, 200, 80],
    }
}

/// One `frame_<step>.ppm` (plus CSV of ball and goal pixels) for every
/// `stride`-th step of `episode`. Returns the image paths in step order.
pub fn render_frames(
    log: &EpisodeLog,
    episode: u32,
    stride: usize,
    radius_px: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut steps = log.episode(episode);
    if steps.is_empty() {
        return Err(Error::InsufficientData(format!("episode {episode} not in log")));
    }
    steps.sort_by_key(|t| t.step);
    fs::create_dir_all(out_dir)?;
    let side = EXTENT_PX as usize;
    let goal_conditioned = log.header.task.goal_conditioned();
    let mut paths = Vec::new();
    for t in steps.iter().step_by(stride.max(1)) {
        let mut img = Image::new(side, side);
        let mut csv = String::from("object,x,y\n");
        for (i, color) in BallColor::ALL.iter().enumerate().take(log.header.n_balls as usize) {
            let [x, y] = ball_pixel(t, i)?;
            img.disc(x, y, radius_px, ball_rgb(*color));
            let _ = writeln!(csv, "{},{x},{y}", color.name());
        }
        if goal_conditioned {
            if let Some([gx, gy]) = t.goal() {
                img.cross(gx, gy, 8, [255, 255, 255]);
                let _ = writeln!(csv, "goal,{gx},{gy}");
            }
        }
        let stem = out_dir.join(format!("frame_{:04}", t.step));
        fs::write(stem.with_extension("ppm"), img.to_ppm())?;
        fs::write(stem.with_extension("csv"), csv)?;
        paths.push(stem.with_extension("ppm"));
    }
    Ok(paths)
}

#[cfg(test)]
mod tests;
