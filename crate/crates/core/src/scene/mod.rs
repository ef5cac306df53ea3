//! Scenario data model: agent tracks, lane centerlines, and the ego frame.

mod synth;
mod transform;

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic_scene, SceneGenConfig};
pub use transform::{denormalize_point, normalize_scene, wrap_angle, EgoFrame};

/// A planar position in meters.
pub type Point = [f64; 2];

/// Sampling interval of every track, seconds (10 Hz).
pub const DT: f64 = 0.1;

/// Upper bound on plausible speeds between consecutive samples, m/s.
pub const MAX_SPEED: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Raw,
    EgoNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub positions: Vec<Point>,
    /// Radians in `(-pi, pi]`, one per position.
    pub headings: Vec<f64>,
    /// Scored agents for losses and metrics.
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub waypoints: Vec<Point>,
}

/// History and future lengths, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub history: usize,
    pub future: usize,
}

impl Horizon {
    pub const DEFAULT: Horizon = Horizon { history: 50, future: 60 };

    pub fn total(&self) -> usize {
        self.history + self.future
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LaneSegment>,
    pub ego_index: usize,
    pub horizon: Horizon,
    pub frame: Frame,
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.agents.iter().enumerate().filter(|(_, a)| a.is_target).map(|(i, _)| i).collect()
    }

    /// Position of agent `n` at the last observed step.
    pub fn last_observed(&self, n: usize) -> Point {
        self.agents[n].positions[self.horizon.history - 1]
    }

    /// Ground-truth future of agent `n`, `T_f` points.
    pub fn future(&self, n: usize) -> &[Point] {
        &self.agents[n].positions[self.horizon.history..]
    }

    /// Checks every structural invariant of the scene.
    pub fn validate(&self) -> Result<()> {
        let t = self.horizon.total();
        if self.horizon.history == 0 || self.horizon.future == 0 {
            return Err(Error::Scene(format!("horizon: {:?} must be positive", self.horizon)));
        }
        if self.agents.is_empty() {
            return Err(Error::Scene("agents: at least one agent is required".into()));
        }
        if self.lanes.is_empty() {
            return Err(Error::Scene("lanes: at least one lane is required".into()));
        }
        if self.ego_index >= self.agents.len() {
            return Err(Error::Scene(format!(
                "ego_index: {} out of range for {} agents",
                self.ego_index,
                self.agents.len()
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.positions.len() != t {
                return Err(Error::Scene(format!(
                    "agents[{i}].positions: horizon requires {t} entries, found {}",
                    a.positions.len()
                )));
            }
            if a.headings.len() != t {
                return Err(Error::Scene(format!(
                    "agents[{i}].headings: horizon requires {t} entries, found {}",
                    a.headings.len()
                )));
            }
            if let Some(k) = a.positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::Scene(format!("agents[{i}].positions[{k}]: non-finite coordinate")));
            }
            if let Some(k) = a.headings.iter().position(|h| !(*h > -core::f64::consts::PI && *h <= core::f64::consts::PI)) {
                return Err(Error::Scene(format!("agents[{i}].headings[{k}]: outside (-pi, pi]")));
            }
            for (k, w) in a.positions.windows(2).enumerate() {
                if dist(w[0], w[1]) / DT >= MAX_SPEED {
                    return Err(Error::Scene(format!(
                        "agents[{i}].positions[{}]: implied speed exceeds {MAX_SPEED} m/s",
                        k + 1
                    )));
                }
            }
        }
        for (z, l) in self.lanes.iter().enumerate() {
            if l.waypoints.len() < 2 {
                return Err(Error::Scene(format!("lanes[{z}].waypoints: at least 2 points required")));
            }
            if let Some(k) = l.waypoints.windows(2).position(|w| w[0] == w[1]) {
                return Err(Error::Scene(format!("lanes[{z}].waypoints[{}]: repeats previous point", k + 1)));
            }
        }
        Ok(())
    }
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// Instantaneous speeds (m/s) along a track: `|p_t - p_{t-1}| / dt`, with
/// the first step using the forward difference.
pub fn speeds(positions: &[Point]) -> Vec<f64> {
    let n = positions.len();
    (0..n)
        .map(|t| match (t, n) {
            (_, 0 | 1) => 0.0,
            (0, _) => dist(positions[1], positions[0]) / DT,
            _ => dist(positions[t], positions[t - 1]) / DT,
        })
        .collect()
}
