//! Three-stage progressive schedule: NeRF-only at the base resolution, then
//! resolution doublings faded in over equal sub-intervals, then the target.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgressiveSchedule {
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub base_resolution: usize,
    pub target_resolution: usize,
}

impl Default for ProgressiveSchedule {
    fn default() -> Self {
        Self {
            t1: 5_000,
            t2: 50_000,
            t3: 250_000,
            base_resolution: 32,
            target_resolution: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Base resolution through the per-point color path only.
    NerfOnly = 1,
    /// Doublings fading in.
    Growing = 2,
    /// Target resolution.
    Full = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub resolution: usize,
    pub alpha: f64,
    pub stage: Stage,
}

impl ProgressiveSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.t1 && self.t1 < self.t2 && self.t2 <= self.t3) {
            return Err(config(format!(
                "schedule needs 0 < T1 < T2 <= T3, got {} / {} / {}",
                self.t1, self.t2, self.t3
            )));
        }
        doublings(self.base_resolution, self.target_resolution)?;
        Ok(())
    }

    pub fn doublings(&self) -> usize {
        doublings(self.base_resolution, self.target_resolution).unwrap_or(0)
    }

    /// Copy with every milestone multiplied by `f`.
    pub fn scaled(&self, f: f64) -> Self {
        let s = |t: u64| ((t as f64 * f).round() as u64).max(1);
        Self {
            t1: s(self.t1),
            t2: s(self.t2),
            t3: s(self.t3),
            ..self.clone()
        }
    }
}

/// Number of doublings from `base` to `target`.
pub fn doublings(base: usize, target: usize) -> Result<usize> {
    if base == 0 || target < base || target % base != 0 || !(target / base).is_power_of_two() {
        return Err(config(format!(
            "target resolution {target} is not a power-of-two multiple of base {base}"
        )));
    }
    Ok((target / base).trailing_zeros() as usize)
}

pub fn schedule_resolve(images_seen: u64, s: &ProgressiveSchedule) -> ScheduleState {
    let k = s.doublings();
    if images_seen < s.t1 {
        return ScheduleState {
            resolution: s.base_resolution,
            alpha: 1.0,
            stage: Stage::NerfOnly,
        };
    }
    if images_seen >= s.t2 || k == 0 {
        let stage = if images_seen >= s.t2 { Stage::Full } else { Stage::Growing };
        return ScheduleState {
            resolution: s.target_resolution,
            alpha: 1.0,
            stage,
        };
    }
    let span = (s.t2 - s.t1) as f64 / k as f64;
    let into = (images_seen - s.t1) as f64;
    let j = ((into / span).floor() as usize).min(k - 1);
    let alpha = ((into - j as f64 * span) / span).clamp(0.0, 1.0);
    ScheduleState {
        resolution: s.base_resolution << (j + 1),
        alpha,
        stage: Stage::Growing,
    }
}
