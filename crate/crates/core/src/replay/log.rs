//! `BOFL` episode logs.
//!
//! Header: magic, then `u32` version, n_balls, history length, action
//! width and task id. Each record: `f32` ground-truth pixels, `f32`
//! action, `f32` reward, `u8` done, `u32` episode, `u32` step, `f32`
//! observation and `f32` next observation. Everything little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Transition;
use crate::boxsim::NUM_VALVES;
use crate::error::{Error, Result};
use crate::tasks::TaskId;

pub const LOG_MAGIC: [u8; 4] = *b"BOFL";
pub const LOG_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 5 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LogHeader {
    pub n_balls: u32,
    pub history: u32,
    pub action_dim: u32,
    pub task: TaskId,
}

impl LogHeader {
    pub fn new(task: TaskId, n_balls: usize, history: usize) -> Self {
        Self {
            n_balls: n_balls as u32,
            history: history as u32,
            action_dim: NUM_VALVES as u32,
            task,
        }
    }

    pub fn pixel_len(&self) -> usize {
        2 * self.n_balls as usize
    }

    pub fn obs_len(&self) -> usize {
        2 * (self.n_balls * self.history) as usize
            + if self.task.goal_conditioned() { 2 } else { 0 }
    }

    pub fn record_bytes(&self) -> usize {
        4 * (self.pixel_len() + self.action_dim as usize + 1) + 1 + 8 + 8 * self.obs_len()
    }

    fn check(&self, t: &Transition) -> Result<()> {
        if t.pixels.len() != self.pixel_len()
            || t.obs.len() != self.obs_len()
            || t.next_obs.len() != self.obs_len()
        {
            return Err(Error::shape(format!(
                "transition has {} pixels / {} obs / {} next obs, log expects {} / {}",
                t.pixels.len(),
                t.obs.len(),
                t.next_obs.len(),
                self.pixel_len(),
                self.obs_len()
            )));
        }
        Ok(())
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_BYTES);
        b.extend_from_slice(&LOG_MAGIC);
        for v in [
            LOG_VERSION,
            self.n_balls,
            self.history,
            self.action_dim,
            self.task.code(),
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub transitions: Vec<Transition>,
}

impl EpisodeLog {
    pub fn new(header: LogHeader) -> Self {
        Self {
            header,
            transitions: Vec::new(),
        }
    }

    /// Distinct episode ids in order of first appearance.
    pub fn episode_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for t in &self.transitions {
            if ids.last() != Some(&t.episode) && !ids.contains(&t.episode) {
                ids.push(t.episode);
            }
        }
        ids
    }

    pub fn episode(&self, id: u32) -> Vec<&Transition> {
        self.transitions
            .iter()
            .filter(|t| t.episode == id)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(HEADER_BYTES + self.transitions.len() * self.header.record_bytes());
        let mut w = LogWriter::new(&mut out, self.header)?;
        for t in &self.transitions {
            w.append(t)?;
        }
        w.finish()?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                record: 0,
                offset: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != LOG_MAGIC {
            return Err(Error::BadMagic {
                expected: LOG_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_BYTES {
            if bytes.len() >= 8 {
                check_version(u32_at(bytes, 4))?;
            }
            return Err(Error::Truncated {
                record: 0,
                offset: bytes.len() as u64,
            });
        }
        check_version(u32_at(bytes, 4))?;
        let header = LogHeader {
            n_balls: u32_at(bytes, 8),
            history: u32_at(bytes, 12),
            action_dim: u32_at(bytes, 16),
            task: TaskId::from_code(u32_at(bytes, 20))?,
        };
        if header.action_dim as usize != NUM_VALVES {
            return Err(Error::Malformed(format!(
                "action width {} (expected {NUM_VALVES})",
                header.action_dim
            )));
        }
        if !(1..=3).contains(&header.n_balls) || header.history == 0 || header.history > 1024 {
            return Err(Error::Malformed(format!(
                "implausible header: {} balls, history {}",
                header.n_balls, header.history
            )));
        }
        let size = header.record_bytes();
        let body = &bytes[HEADER_BYTES..];
        let full = body.len() / size;
        if body.len() % size != 0 {
            return Err(Error::Truncated {
                record: full as u64,
                offset: (HEADER_BYTES + full * size) as u64,
            });
        }
        let mut transitions = Vec::with_capacity(full);
        for rec in body.chunks_exact(size) {
            let mut r = Reader { b: rec, at: 0 };
            let pixels = r.f32s(header.pixel_len());
            let mut action = [0f32; NUM_VALVES];
            action.copy_from_slice(&r.f32s(NUM_VALVES));
            let reward = r.f32s(1)[0];
            let done = match r.u8() {
                0 => false,
                1 => true,
                v => {
                    return Err(Error::Malformed(format!(
                        "record {}: done flag {v}",
                        transitions.len()
                    )))
                }
            };
            let episode = r.u32();
            let step = r.u32();
            let obs = r.f32s(header.obs_len());
            let next_obs = r.f32s(header.obs_len());
            transitions.push(Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
                pixels,
                episode,
                step,
            });
        }
        Ok(Self {
            header,
            transitions,
        })
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != LOG_VERSION {
        return Err(Error::UnsupportedVersion(v));
    }
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn f32s(&mut self, n: usize) -> Vec<f32> {
        let out = self.b[self.at..self.at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.at += 4 * n;
        out
    }

    fn u8(&mut self) -> u8 {
        self.at += 1;
        self.b[self.at - 1]
    }

    fn u32(&mut self) -> u32 {
        self.at += 4;
        u32_at(self.b, self.at - 4)
    }
}

/// Streaming log writer; records go out as they are appended.
pub struct LogWriter<W: Write> {
    out: W,
    header: LogHeader,
    buf: Vec<u8>,
    records: u64,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, header: LogHeader) -> Result<Self> {
        out.write_all(&header.to_bytes())?;
        Ok(Self {
            out,
            header,
            buf: Vec::with_capacity(header.record_bytes()),
            records: 0,
        })
    }

    pub fn append(&mut self, t: &Transition) -> Result<()> {
        self.header.check(t)?;
        let b = &mut self.buf;
        b.clear();
        for v in &t.pixels {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in &t.action {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&t.reward.to_le_bytes());
        b.push(t.done as u8);
        b.extend_from_slice(&t.episode.to_le_bytes());
        b.extend_from_slice(&t.step.to_le_bytes());
        for v in t.obs.iter().chain(&t.next_obs) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(b)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl LogWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: LogHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

pub fn write_log(path: &Path, log: &EpisodeLog) -> Result<()> {
    let mut w = LogWriter::create(path, log.header)?;
    for t in &log.transitions {
        w.append(t)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<EpisodeLog> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    EpisodeLog::from_bytes(&bytes)
}

/// Recomputes every reward with `reward_fn`; nothing else changes.
pub fn relabel<F>(log: &EpisodeLog, mut reward_fn: F) -> Result<EpisodeLog>
where
    F: FnMut(&Transition) -> Result<f64>,
{
    let mut out = log.clone();
    for t in &mut out.transitions {
        let r = reward_fn(t)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "relabeled reward of episode {} step {}",
                t.episode, t.step
            )));
        }
        t.reward = r as f32;
    }
    Ok(out)
}
