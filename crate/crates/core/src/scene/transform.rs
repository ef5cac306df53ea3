use core::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{Frame, Point, Scene};
use crate::error::{Error, Result};

/// Ego pose defining the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoFrame {
    pub origin: Point,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
}

impl EgoFrame {
    /// Ego pose at the last observed step.
    pub fn of(scene: &Scene) -> Self {
        let ego = &scene.agents[scene.ego_index];
        let t = scene.horizon.history - 1;
        Self { origin: ego.positions[t], heading: ego.headings[t] }
    }

    /// `(p - o) * I(theta)` with `p` as a row vector and
    /// `I(theta) = [[cos, -sin], [sin, cos]]`.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = libm::sincos(self.heading);
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [dx * c + dy * s, -dx * s + dy * c]
    }

    pub fn to_world(&self, p: Point) -> Point {
        denormalize_point(self, p)
    }
}

/// Inverse of [`EgoFrame::to_local`].
pub fn denormalize_point(frame: &EgoFrame, p: Point) -> Point {
    let (s, c) = libm::sincos(frame.heading);
    [p[0] * c - p[1] * s + frame.origin[0], p[0] * s + p[1] * c + frame.origin[1]]
}

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned unchanged.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut t = libm::fmod(angle + PI, TAU);
    if t < 0.0 {
        t += TAU;
    }
    let r = t - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

/// Rigidly moves a raw scene into the ego frame: the ego sits at the origin
/// with heading zero at the last observed step. Lane waypoints follow the
/// position rule; lanes carry no headings.
pub fn normalize_scene(scene: &Scene) -> Result<(Scene, EgoFrame)> {
    if scene.frame != Frame::Raw {
        return Err(Error::Scene("scene is already ego-normalized".into()));
    }
    scene.validate()?;
    let frame = EgoFrame::of(scene);
    let mut out = scene.clone();
    for a in &mut out.agents {
        for p in &mut a.positions {
            *p = frame.to_local(*p);
        }
        for h in &mut a.headings {
            *h = wrap_angle(*h - frame.heading);
        }
    }
    for l in &mut out.lanes {
        for p in &mut l.waypoints {
            *p = frame.to_local(*p);
        }
    }
    out.frame = Frame::EgoNormalized;
    Ok((out, frame))
}
