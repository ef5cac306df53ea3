//! Scene-level multi-world displacement metrics.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{dist, Point};

pub const DEFAULT_TAU: f64 = 2.0;

/// `worlds[k][n][t]`: position of agent `n` at future step `t` in world `k`.
pub type Worlds = Vec<Vec<Vec<Point>>>;

/// Metrics of one scene; `best_world` minimises the mean final error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
    pub best_world: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleAgentMetrics {
    pub min_fde: f64,
    pub min_ade: f64,
    pub mr: f64,
}

/// Dataset-level report: unweighted means of the per-scene values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
    pub n_scenes: usize,
    pub tau: f64,
    pub per_scene: Vec<SceneMetrics>,
}

pub(crate) fn final_error(pred: &[Point], truth: &[Point]) -> f64 {
    dist(pred[pred.len() - 1], truth[truth.len() - 1])
}

fn mean_error(pred: &[Point], truth: &[Point]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| dist(*a, *b)).sum::<f64>() / truth.len() as f64
}

fn check(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Loss("metrics need at least one target agent".into()));
    }
    if worlds.is_empty() {
        return Err(Error::Loss("metrics need at least one world".into()));
    }
    for (k, w) in worlds.iter().enumerate() {
        if w.len() != truth.len() {
            return Err(Error::Loss(format!("world {k} has {} agents, truth has {}", w.len(), truth.len())));
        }
        for &n in targets {
            if n >= truth.len() || truth[n].is_empty() || w[n].len() != truth[n].len() {
                return Err(Error::Loss(format!("world {k}, agent {n}: trajectory length mismatch")));
            }
        }
    }
    Ok(())
}

fn world_mean(targets: &[usize], f: impl Fn(usize) -> f64) -> f64 {
    targets.iter().map(|&n| f(n)).sum::<f64>() / targets.len() as f64
}

/// Minimum over worlds of the mean final error across `targets`, with the minimiser.
pub fn avg_min_fde(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize]) -> Result<(f64, usize)> {
    check(worlds, truth, targets)?;
    let mut best = (f64::INFINITY, 0);
    for (k, w) in worlds.iter().enumerate() {
        let e = world_mean(targets, |n| final_error(&w[n], &truth[n]));
        if e < best.0 {
            best = (e, k);
        }
    }
    Ok(best)
}

/// Minimum over worlds of the per-step error averaged over `targets` and steps.
pub fn avg_min_ade(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize]) -> Result<f64> {
    check(worlds, truth, targets)?;
    Ok(worlds
        .iter()
        .map(|w| world_mean(targets, |n| mean_error(&w[n], &truth[n])))
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of `targets` whose final error in the FDE-minimising world exceeds `tau`.
pub fn actor_mr(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize], tau: f64) -> Result<f64> {
    let (_, k) = avg_min_fde(worlds, truth, targets)?;
    Ok(world_mean(targets, |n| f64::from(u8::from(final_error(&worlds[k][n], &truth[n]) > tau))))
}

pub fn scene_metrics(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize], tau: f64) -> Result<SceneMetrics> {
    let (fde, best_world) = avg_min_fde(worlds, truth, targets)?;
    Ok(SceneMetrics {
        avg_min_fde: fde,
        avg_min_ade: avg_min_ade(worlds, truth, targets)?,
        actor_mr: actor_mr(worlds, truth, targets, tau)?,
        best_world,
    })
}

/// MinFDE, MinADE and miss indicator for one focal agent.
pub fn single_agent_metrics(worlds: &Worlds, truth: &[Vec<Point>], agent: usize, tau: f64) -> Result<SingleAgentMetrics> {
    let m = scene_metrics(worlds, truth, &[agent], tau)?;
    Ok(SingleAgentMetrics { min_fde: m.avg_min_fde, min_ade: m.avg_min_ade, mr: m.actor_mr })
}

impl MetricsReport {
    pub fn aggregate(per_scene: Vec<SceneMetrics>, tau: f64) -> Self {
        let n = per_scene.len();
        let mean = |f: fn(&SceneMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_scene.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            avg_min_fde: mean(|m| m.avg_min_fde),
            avg_min_ade: mean(|m| m.avg_min_ade),
            actor_mr: mean(|m| m.actor_mr),
            n_scenes: n,
            tau,
            per_scene,
        }
    }
}
