//! Temporal random masking of agent history, agent future and lane waypoints.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::scene::{Point, Scene};

pub const MAX_RATIO: f64 = 0.95;

/// Fractions of history steps, future steps and lane waypoints to mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRatios {
    pub history: f64,
    pub future: f64,
    pub lanes: f64,
}

impl Default for MaskRatios {
    fn default() -> Self {
        Self { history: 0.30, future: 0.70, lanes: 0.50 }
    }
}

impl MaskRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("history", self.history), ("future", self.future), ("lanes", self.lanes)] {
            if !(0.0..=MAX_RATIO).contains(&r) {
                return Err(Error::Mask(format!("{name} ratio {r} outside [0, {MAX_RATIO}]")));
            }
        }
        Ok(())
    }
}

/// How masked positions are placed within a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// Uniform selection without replacement.
    #[default]
    Random,
    /// One contiguous run at a uniformly random offset.
    Block,
}

/// `round(ratio * len)` with ties to even, capped so at least one entry stays visible.
pub fn masked_count(ratio: f64, len: usize) -> usize {
    let c = libm::rint(ratio * len as f64) as usize;
    c.min(len.saturating_sub(1))
}

/// Per-scene masks; `true` marks a masked entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratios: MaskRatios,
    pub history: Vec<Vec<bool>>,
    pub future: Vec<Vec<bool>>,
    pub lanes: Vec<Vec<bool>>,
}

fn draw(rng: &mut RngState, len: usize, count: usize, style: MaskStyle) -> Vec<bool> {
    let mut m = alloc::vec![false; len];
    match style {
        MaskStyle::Random => {
            for i in rng.sample_indices(len, count) {
                m[i] = true;
            }
        }
        MaskStyle::Block => {
            let start = rng.int_range(0, len - count);
            m[start..start + count].iter_mut().for_each(|v| *v = true);
        }
    }
    m
}

/// Independent masks per agent and per lane.
pub fn make_mask_plan(scene: &Scene, ratios: MaskRatios, style: MaskStyle, rng: &mut RngState) -> Result<MaskPlan> {
    ratios.validate()?;
    let (th, tf) = (scene.horizon.history, scene.horizon.future);
    let ch = masked_count(ratios.history, th);
    let cf = masked_count(ratios.future, tf);
    let mut history = Vec::with_capacity(scene.num_agents());
    let mut future = Vec::with_capacity(scene.num_agents());
    for _ in &scene.agents {
        history.push(draw(rng, th, ch, style));
        future.push(draw(rng, tf, cf, style));
    }
    let lanes = scene
        .lanes
        .iter()
        .map(|l| {
            let w = l.waypoints.len();
            draw(rng, w, masked_count(ratios.lanes, w), style)
        })
        .collect();
    Ok(MaskPlan { ratios, history, future, lanes })
}

impl MaskPlan {
    /// A plan with nothing masked.
    pub fn all_visible(scene: &Scene) -> Self {
        Self {
            ratios: MaskRatios { history: 0.0, future: 0.0, lanes: 0.0 },
            history: alloc::vec![alloc::vec![false; scene.horizon.history]; scene.num_agents()],
            future: alloc::vec![alloc::vec![false; scene.horizon.future]; scene.num_agents()],
            lanes: scene.lanes.iter().map(|l| alloc::vec![false; l.waypoints.len()]).collect(),
        }
    }

    /// The complementary plan (visible and masked swapped).
    pub fn complement(&self) -> Self {
        let flip = |v: &Vec<Vec<bool>>| v.iter().map(|m| m.iter().map(|b| !b).collect()).collect();
        Self { ratios: self.ratios, history: flip(&self.history), future: flip(&self.future), lanes: flip(&self.lanes) }
    }

    pub fn check(&self, scene: &Scene) -> Result<()> {
        let n = scene.num_agents();
        if self.history.len() != n || self.future.len() != n || self.lanes.len() != scene.num_lanes() {
            return Err(Error::Mask(format!(
                "plan covers {}/{} agents and {} lanes; scene has {n} agents and {} lanes",
                self.history.len(),
                self.future.len(),
                self.lanes.len(),
                scene.num_lanes()
            )));
        }
        for i in 0..n {
            if self.history[i].len() != scene.horizon.history || self.future[i].len() != scene.horizon.future {
                return Err(Error::Mask(format!("agent {i}: mask length does not match horizon")));
            }
        }
        for (z, l) in scene.lanes.iter().enumerate() {
            if self.lanes[z].len() != l.waypoints.len() {
                return Err(Error::Mask(format!("lane {z}: mask length does not match waypoint count")));
            }
        }
        Ok(())
    }
}

/// A subset of a sequence: `(index within the sequence, point)` in index order.
pub type Steps = Vec<(usize, Point)>;

/// One side of a split: per-agent history and future steps, per-lane waypoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenViews {
    pub history: Vec<Steps>,
    pub future: Vec<Steps>,
    pub lanes: Vec<Steps>,
}

fn pick(points: &[Point], mask: &[bool], want: bool) -> Steps {
    points.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m == want).map(|(i, (&p, _))| (i, p)).collect()
}

/// Splits a scene into `(visible, masked)` views under `plan`.
pub fn split_tokens(scene: &Scene, plan: &MaskPlan) -> Result<(TokenViews, TokenViews)> {
    plan.check(scene)?;
    let th = scene.horizon.history;
    let mut vis = TokenViews::default();
    let mut msk = TokenViews::default();
    for (i, a) in scene.agents.iter().enumerate() {
        let (h, f) = a.positions.split_at(th);
        vis.history.push(pick(h, &plan.history[i], false));
        msk.history.push(pick(h, &plan.history[i], true));
        vis.future.push(pick(f, &plan.future[i], false));
        msk.future.push(pick(f, &plan.future[i], true));
    }
    for (z, l) in scene.lanes.iter().enumerate() {
        vis.lanes.push(pick(&l.waypoints, &plan.lanes[z], false));
        msk.lanes.push(pick(&l.waypoints, &plan.lanes[z], true));
    }
    Ok((vis, msk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneGenConfig};

    fn scene(seed: u64) -> Scene {
        generate_synthetic_scene(&mut RngState::new(seed), &SceneGenConfig::default()).unwrap()
    }

    #[test]
    fn default_counts() {
        let s = scene(1);
        let p = make_mask_plan(&s, MaskRatios::default(), MaskStyle::Random, &mut RngState::new(5)).unwrap();
        for i in 0..s.num_agents() {
            assert_eq!(p.history[i].iter().filter(|b| **b).count(), 15);
            assert_eq!(p.future[i].iter().filter(|b| **b).count(), 42);
        }
        for l in &p.lanes {
            assert_eq!(l.iter().filter(|b| **b).count(), 10);
        }
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let s = scene(2);
        let r = MaskRatios { history: 0.0, future: 0.0, lanes: 0.0 };
        let p = make_mask_plan(&s, r, MaskStyle::Random, &mut RngState::new(0)).unwrap();
        let (vis, msk) = split_tokens(&s, &p).unwrap();
        assert!(msk.history.iter().chain(&msk.future).chain(&msk.lanes).all(|v| v.is_empty()));
        assert_eq!(vis.history[0].len(), 50);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let s = scene(3);
        let r = MaskRatios { history: 0.96, ..Default::default() };
        assert!(make_mask_plan(&s, r, MaskStyle::Random, &mut RngState::new(0)).is_err());
        let r = MaskRatios { lanes: -0.1, ..Default::default() };
        assert!(make_mask_plan(&s, r, MaskStyle::Random, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn complement_swaps_views() {
        let s = scene(4);
        let p = make_mask_plan(&s, MaskRatios::default(), MaskStyle::Random, &mut RngState::new(1)).unwrap();
        let (v1, m1) = split_tokens(&s, &p).unwrap();
        let (v2, m2) = split_tokens(&s, &p.complement()).unwrap();
        assert_eq!(v1, m2);
        assert_eq!(m1, v2);
    }

    #[test]
    fn never_fully_masked() {
        assert_eq!(masked_count(0.95, 2), 1);
        assert_eq!(masked_count(0.95, 1), 0);
        assert_eq!(masked_count(0.5, 5), 2); // 2.5 ties to even
    }

    #[test]
    fn block_style_is_contiguous() {
        let s = scene(5);
        let p = make_mask_plan(&s, MaskRatios::default(), MaskStyle::Block, &mut RngState::new(1)).unwrap();
        for m in &p.history {
            let first = m.iter().position(|b| *b).unwrap();
            assert!(m[first..first + 15].iter().all(|b| *b));
            assert_eq!(m.iter().filter(|b| **b).count(), 15);
        }
    }

    #[test]
    fn mismatched_plan_rejected() {
        let p = MaskPlan::all_visible(&scene(6));
        let other = scene(7);
        if other.num_agents() != p.history.len() || other.num_lanes() != p.lanes.len() {
            assert!(split_tokens(&other, &p).is_err());
        }
        let mut bad = MaskPlan::all_visible(&other);
        bad.future[0].pop();
        assert!(split_tokens(&other, &bad).is_err());
    }
}
