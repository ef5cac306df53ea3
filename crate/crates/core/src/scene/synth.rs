//! Synthetic four-way intersection scenes.
//!
//! Lanes are drawn from 16 candidates (four approaches, each with two
//! through lanes, one left turn and one right turn). Every agent follows one
//! lane's waypoint polyline with a smooth longitudinal speed profile plus
//! bounded lateral and heading noise. The whole scene is then placed at a
//! random world pose so that ego normalization is not a no-op.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{dist, wrap_angle, AgentTrack, Frame, Horizon, LaneSegment, Point, Scene, DT};
use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub horizon: Horizon,
    /// Waypoints per lane.
    pub lane_points: usize,
    /// Scale of lateral, heading and speed noise; 0 puts agents exactly on their lane.
    pub noise: f64,
    /// Hard cap on instantaneous speed, m/s.
    pub speed_cap: f64,
    /// Half-width of the uniform world offset applied to raw scenes, meters.
    pub world_extent: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            min_agents: 2,
            max_agents: 8,
            min_lanes: 4,
            max_lanes: 16,
            horizon: Horizon::DEFAULT,
            lane_points: 20,
            noise: 1.0,
            speed_cap: 20.0,
            world_extent: 500.0,
        }
    }
}

const CANDIDATE_LANES: usize = 16;

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.min_agents < 2 || self.min_agents > self.max_agents || self.max_agents > 8 {
            return bad(format!("agent range [{}, {}] must lie within [2, 8]", self.min_agents, self.max_agents));
        }
        if self.min_lanes < 1 || self.min_lanes > self.max_lanes || self.max_lanes > CANDIDATE_LANES {
            return bad(format!(
                "lane range [{}, {}] must lie within [1, {CANDIDATE_LANES}]",
                self.min_lanes, self.max_lanes
            ));
        }
        if self.horizon.history == 0 || self.horizon.future == 0 {
            return bad("horizons must be positive".into());
        }
        if self.lane_points < 2 {
            return bad("lane_points must be at least 2".into());
        }
        if !(self.noise >= 0.0 && self.noise <= 5.0) {
            return bad(format!("noise {} must lie in [0, 5]", self.noise));
        }
        if !(self.speed_cap > 1.0 && self.speed_cap < super::MAX_SPEED) {
            return bad(format!("speed_cap {} must lie in (1, {})", self.speed_cap, super::MAX_SPEED));
        }
        // The longest drive must fit on the shortest lane.
        let travel = MAX_START + 0.9 * self.speed_cap * self.horizon.total() as f64 * DT;
        if travel > MIN_LANE_LENGTH {
            return bad(format!("horizon too long: agents may travel {travel:.0} m on {MIN_LANE_LENGTH} m lanes"));
        }
        if !(self.world_extent >= 0.0 && self.world_extent.is_finite()) {
            return bad("world_extent must be finite and nonnegative".into());
        }
        Ok(())
    }
}

const MAX_START: f64 = 30.0;
const MIN_LANE_LENGTH: f64 = 250.0;

#[derive(Clone, Copy)]
enum Kind {
    Straight,
    Left,
    Right,
}

fn arc(out: &mut Vec<Point>, center: Point, r: f64, from: f64, to: f64) {
    let steps = 24;
    for i in 1..=steps {
        let a = from + (to - from) * i as f64 / steps as f64;
        out.push([center[0] + r * libm::cos(a), center[1] + r * libm::sin(a)]);
    }
}

/// Dense centerline of a lane approaching eastbound, before rotation.
fn dense_lane(kind: Kind, offset: f64) -> Vec<Point> {
    let y = -offset;
    let mut pts = alloc::vec![[-150.0, y]];
    match kind {
        Kind::Straight => pts.push([100.0, y]),
        Kind::Right => {
            let r = 6.0;
            pts.push([-5.0, y]);
            arc(&mut pts, [-5.0, y - r], r, FRAC_PI_2, 0.0);
            pts.push([-5.0 + r, y - r - 100.0]);
        }
        Kind::Left => {
            let r = 15.0;
            pts.push([-5.0, y]);
            arc(&mut pts, [-5.0, y + r], r, -FRAC_PI_2, 0.0);
            pts.push([-5.0 + r, y + r + 100.0]);
        }
    }
    pts
}

fn candidate(index: usize) -> Vec<Point> {
    let dir = index / 4;
    let (kind, offset) = match index % 4 {
        0 => (Kind::Straight, 1.75),
        1 => (Kind::Straight, 5.25),
        2 => (Kind::Left, 1.75),
        _ => (Kind::Right, 5.25),
    };
    let (s, c) = libm::sincos(dir as f64 * FRAC_PI_2);
    dense_lane(kind, offset).into_iter().map(|p| [p[0] * c - p[1] * s, p[0] * s + p[1] * c]).collect()
}

fn cumulative(poly: &[Point]) -> Vec<f64> {
    let mut acc = alloc::vec![0.0];
    for w in poly.windows(2) {
        acc.push(acc.last().unwrap() + dist(w[0], w[1]));
    }
    acc
}

/// Point and unit tangent at arc length `s` along a polyline (clamped to its ends).
fn locate(poly: &[Point], cum: &[f64], s: f64) -> (Point, Point) {
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let mut k = cum.partition_point(|&c| c <= s).saturating_sub(1);
    if k >= poly.len() - 1 {
        k = poly.len() - 2;
    }
    let seg = cum[k + 1] - cum[k];
    let u = if seg > 0.0 { (s - cum[k]) / seg } else { 0.0 };
    let a = poly[k];
    let b = poly[k + 1];
    let t = [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg];
    ([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])], t)
}

fn resample(poly: &[Point], count: usize) -> Vec<Point> {
    let cum = cumulative(poly);
    let total = *cum.last().unwrap();
    (0..count).map(|i| locate(poly, &cum, total * i as f64 / (count - 1) as f64).0).collect()
}

fn drive(rng: &mut RngState, lane: &[Point], cfg: &SceneGenConfig) -> AgentTrack {
    let t_total = cfg.horizon.total();
    let cum = cumulative(lane);
    let vmax = 0.9 * cfg.speed_cap;
    let mut v = rng.uniform(0.1 * vmax, 0.75 * vmax);
    let accel = rng.uniform(-1.5, 1.5);
    let mut s = rng.uniform(0.0, MAX_START);
    let mut lat: f64 = 0.0;
    let lat_bound = 0.5 * cfg.noise;
    let mut positions = Vec::with_capacity(t_total);
    let mut tangents = Vec::with_capacity(t_total);
    for _ in 0..t_total {
        let (p, tan) = locate(lane, &cum, s);
        // Left-hand normal of the travel direction.
        positions.push([p[0] - tan[1] * lat, p[1] + tan[0] * lat]);
        tangents.push(tan);
        s += v * DT;
        v = (v + accel * DT + cfg.noise * 0.05 * rng.normal().clamp(-3.0, 3.0)).clamp(0.0, vmax);
        lat = (0.95 * lat + cfg.noise * rng.uniform(-0.05, 0.05)).clamp(-lat_bound, lat_bound);
    }
    let headings = (0..t_total)
        .map(|t| {
            let (a, b) = if t + 1 < t_total { (positions[t], positions[t + 1]) } else { (positions[t - 1], positions[t]) };
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let base = if libm::hypot(dx, dy) > 1e-3 {
                libm::atan2(dy, dx)
            } else {
                libm::atan2(tangents[t][1], tangents[t][0])
            };
            wrap_angle(base + cfg.noise * 0.02 * rng.normal().clamp(-2.0, 2.0))
        })
        .collect();
    AgentTrack { positions, headings, is_target: false }
}

/// Draws one raw-frame scene. Agent 0 is the ego.
pub fn generate_synthetic_scene(rng: &mut RngState, cfg: &SceneGenConfig) -> Result<Scene> {
    cfg.validate()?;
    let n_agents = rng.int_range(cfg.min_agents, cfg.max_agents);
    let n_lanes = rng.int_range(cfg.min_lanes, cfg.max_lanes);
    let mut ids: Vec<usize> = (0..CANDIDATE_LANES).collect();
    rng.shuffle(&mut ids);
    ids.truncate(n_lanes);
    ids.sort_unstable();

    let lanes: Vec<LaneSegment> =
        ids.iter().map(|&i| LaneSegment { waypoints: resample(&candidate(i), cfg.lane_points) }).collect();

    let mut agents: Vec<AgentTrack> = (0..n_agents)
        .map(|_| {
            let z = rng.int_range(0, n_lanes - 1);
            drive(rng, &lanes[z].waypoints, cfg)
        })
        .collect();
    let n_targets = rng.int_range(2, n_agents);
    let mut order: Vec<usize> = (0..n_agents).collect();
    rng.shuffle(&mut order);
    for &i in &order[..n_targets] {
        agents[i].is_target = true;
    }

    // Random world pose.
    let rot = rng.uniform(-PI, PI);
    let shift = [rng.uniform(-cfg.world_extent, cfg.world_extent), rng.uniform(-cfg.world_extent, cfg.world_extent)];
    let (s, c) = libm::sincos(rot);
    let place = |p: Point| [p[0] * c - p[1] * s + shift[0], p[0] * s + p[1] * c + shift[1]];
    for a in &mut agents {
        a.positions.iter_mut().for_each(|p| *p = place(*p));
        a.headings.iter_mut().for_each(|h| *h = wrap_angle(*h + rot));
    }
    let lanes = lanes
        .into_iter()
        .map(|l| LaneSegment { waypoints: l.waypoints.into_iter().map(place).collect() })
        .collect();

    let scene = Scene { agents, lanes, ego_index: 0, horizon: cfg.horizon, frame: Frame::Raw };
    scene.validate()?;
    Ok(scene)
}
