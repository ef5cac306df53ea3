//! Pre-training and fine-tuning objectives.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{final_error, Worlds};
use crate::model::{MotionOutput, SpatialOutput, WorldsVar};
use crate::numerics::{Graph, Tensor, Var};
use crate::scene::Point;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub l_align: f64,
    pub l_spatial: f64,
    pub l_motion: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLossReport {
    pub k_star: usize,
    pub l_huber: f64,
    pub l_ce: f64,
    pub total: f64,
}

/// Mean of `f(pred - target)` over the rows in `rows`; `None` when there is
/// nothing to average.
fn masked_mean(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    rows: &[usize],
    f: impl Fn(&mut Graph, Var) -> Var,
) -> Result<Option<Var>> {
    let p = g.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::Loss(format!("prediction {:?} vs target {:?}", p.shape(), target.shape())));
    }
    if rows.is_empty() || p.cols() == 0 {
        return Ok(None);
    }
    let sel = g.select_rows(pred, rows)?;
    let tgt: Vec<f64> = rows.iter().flat_map(|&r| target.row_slice(r).iter().copied()).collect();
    let tgt = g.constant(Tensor::matrix(rows.len(), target.cols(), tgt)?);
    let d = g.sub(sel, tgt)?;
    let e = f(g, d);
    Ok(Some(g.mean(e)))
}

fn sum_terms(g: &mut Graph, terms: &[Option<Var>]) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for t in terms.iter().flatten() {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

/// MSE between regressed and encoded masked representations over the slots in `rows`.
pub fn alignment_loss(g: &mut Graph, r_m: Var, e_m: Var, rows: &[usize]) -> Result<Var> {
    let (a, b) = (g.value(r_m).shape().to_vec(), g.value(e_m).shape().to_vec());
    if a != b {
        return Err(Error::Loss(format!("alignment operands {a:?} vs {b:?}")));
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let r = g.select_rows(r_m, rows)?;
    let e = g.select_rows(e_m, rows)?;
    let d = g.sub(r, e)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Masked ground truth for the spatial head, in meters, one row per agent or lane.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTargets {
    pub history: Tensor,
    pub future: Tensor,
    pub lanes: Tensor,
}

/// Masked ground-truth speeds in m/s, one row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTargets {
    pub history: Tensor,
    pub future: Tensor,
}

/// Sum of per-modality L1 means; agent and lane rows outside `agents`/`lanes` are ignored.
pub fn spatial_loss(
    g: &mut Graph,
    pred: &SpatialOutput,
    target: &SpatialTargets,
    agents: &[usize],
    lanes: &[usize],
) -> Result<Var> {
    let h = masked_mean(g, pred.history, &target.history, agents, |g, d| g.abs(d))?;
    let f = masked_mean(g, pred.future, &target.future, agents, |g, d| g.abs(d))?;
    let l = masked_mean(g, pred.lanes, &target.lanes, lanes, |g, d| g.abs(d))?;
    sum_terms(g, &[h, f, l])
}

/// Sum of history and future L1 speed means over the rows in `agents`.
pub fn motion_loss(g: &mut Graph, pred: &MotionOutput, target: &MotionTargets, agents: &[usize]) -> Result<Var> {
    let h = masked_mean(g, pred.history, &target.history, agents, |g, d| g.abs(d))?;
    let f = masked_mean(g, pred.future, &target.future, agents, |g, d| g.abs(d))?;
    sum_terms(g, &[h, f])
}

/// `alpha·l_align + l_spatial + l_motion`.
pub fn pretrain_loss(alpha: f64, l_align: f64, l_spatial: f64, l_motion: f64) -> Result<PretrainLossReport> {
    if !(alpha >= 0.0) {
        return Err(Error::Loss(format!("alpha must be nonnegative, got {alpha}")));
    }
    Ok(PretrainLossReport { l_align, l_spatial, l_motion, total: alpha * l_align + l_spatial + l_motion, alpha })
}

/// World whose mean final-step error over `targets` is smallest; ties go to
/// the lowest index.
pub fn select_winner(worlds: &Worlds, truth: &[Vec<Point>], targets: &[usize]) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::Loss("winner selection needs at least one target agent".into()));
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..worlds.len() {
        let e = targets.iter().map(|&n| final_error(&worlds[k][n], &truth[n])).sum::<f64>() / targets.len() as f64;
        if e < best.1 {
            best = (k, e);
        }
    }
    Ok(best.0)
}

/// Graph nodes of the fine-tuning objective.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneLoss {
    pub huber: Var,
    pub ce: Var,
    pub total: Var,
    pub k_star: usize,
}

/// Huber on the winning world's target trajectories plus cross-entropy of the
/// mode logits against the winner.
pub fn finetune_loss(
    g: &mut Graph,
    worlds: &WorldsVar,
    truth: &[Vec<Point>],
    targets: &[usize],
    k_star: usize,
    delta: f64,
) -> Result<FinetuneLoss> {
    if k_star >= worlds.modes {
        return Err(Error::Loss(format!("winner {k_star} out of range for {} modes", worlds.modes)));
    }
    if truth.len() != worlds.agents {
        return Err(Error::Loss(format!("{} ground-truth tracks for {} agents", truth.len(), worlds.agents)));
    }
    let cols = g.value(worlds.trajectories).cols();
    let mut y = Tensor::zeros(&[worlds.agents, cols]);
    for (n, track) in truth.iter().enumerate() {
        if track.len() * 2 != cols {
            return Err(Error::Loss(format!("agent {n}: {} future steps, model emits {}", track.len(), cols / 2)));
        }
        let row = &mut y.data_mut()[n * cols..(n + 1) * cols];
        for (t, p) in track.iter().enumerate() {
            row[2 * t..2 * t + 2].copy_from_slice(p);
        }
    }
    let rows: Vec<usize> = targets.iter().map(|&n| k_star * worlds.agents + n).collect();
    let pred = g.select_rows(worlds.trajectories, &rows)?;
    let target_rows: Vec<f64> = targets.iter().flat_map(|&n| y.row_slice(n).iter().copied()).collect();
    let tgt = g.constant(Tensor::matrix(targets.len(), cols, target_rows)?);
    let d = g.sub(pred, tgt)?;
    let h = g.huber(d, delta);
    let huber = g.mean(h);
    let ce = g.cross_entropy(worlds.logits, k_star)?;
    let total = g.add(huber, ce)?;
    Ok(FinetuneLoss { huber, ce, total, k_star })
}

impl FinetuneLoss {
    pub fn report(&self, g: &Graph) -> FinetuneLossReport {
        FinetuneLossReport {
            k_star: self.k_star,
            l_huber: g.value(self.huber).item(),
            l_ce: g.value(self.ce).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mode, ParamStore, RngState};

    fn graph(store: &ParamStore) -> Graph<'_> {
        Graph::new(store, Mode::Eval, RngState::new(0))
    }

    #[test]
    fn alignment_identity_and_offset() {
        let store = ParamStore::new();
        let mut g = graph(&store);
        let a = g.constant(Tensor::matrix(2, 3, alloc::vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, alloc::vec![2., 3., 4., 5., 6., 7.]).unwrap());
        let zero = alignment_loss(&mut g, a, a, &[0, 1]).unwrap();
        let one = alignment_loss(&mut g, b, a, &[0, 1]).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        assert!((g.value(one).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_shape_mismatch() {
        let store = ParamStore::new();
        let mut g = graph(&store);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(alignment_loss(&mut g, a, b, &[0]).is_err());
    }

    #[test]
    fn pretrain_total_and_negative_alpha() {
        assert_eq!(pretrain_loss(2.0, 1.0, 1.0, 1.0).unwrap().total, 4.0);
        assert_eq!(pretrain_loss(0.0, 5.0, 1.0, 2.0).unwrap().total, 3.0);
        assert!(pretrain_loss(-0.1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn winner_prefers_exact_mode_and_lowest_tie() {
        let truth = alloc::vec![alloc::vec![[1.0, 1.0]; 3]];
        let off = alloc::vec![alloc::vec![[2.0, 1.0]; 3]];
        let worlds = alloc::vec![off.clone(), off.clone(), truth.clone(), off];
        assert_eq!(select_winner(&worlds, &truth, &[0]).unwrap(), 2);
        let tied = alloc::vec![truth.clone(), truth.clone()];
        assert_eq!(select_winner(&tied, &truth, &[0]).unwrap(), 0);
        assert!(select_winner(&tied, &truth, &[]).is_err());
    }
}
