//! Token embedders: a two-level temporal pyramid for trajectories, a
//! point-wise MLP with max pooling for lanes, and the learnable positional table.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::{Steps, TokenViews};
use crate::nn::{Init, Linear};
use crate::numerics::{Graph, ParamId, Tensor, Var};

/// Raw per-step features: `(x, y, time, validity)`.
pub const STEP_FEATURES: usize = 4;
/// Initial spread of the positional table.
pub const PE_STD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Visible,
    Masked,
}

/// A trajectory fragment with the global timestep of its sequence start.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub steps: &'a [(usize, [f64; 2])],
    pub time_offset: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectoryEmbedder {
    pub lift: Linear,
    pub down1: Linear,
    pub down2: Linear,
    pub lateral: [Linear; 3],
}

/// Row bookkeeping for a batch of variable-length sequences stacked vertically.
struct Layout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl Layout {
    fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { lens, offsets }
    }

    fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    fn halved(&self) -> Self {
        Self::new(self.lens.iter().map(|l| l.div_ceil(2)).collect())
    }

    /// im2col rows for a kernel-3, stride-2, zero-padded convolution.
    fn conv_rows(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::new();
        for (&len, &off) in self.lens.iter().zip(&self.offsets) {
            for j in 0..len.div_ceil(2) {
                for d in [-1isize, 0, 1] {
                    let i = 2 * j as isize + d;
                    idx.push((i >= 0 && (i as usize) < len).then(|| off + i as usize));
                }
            }
        }
        idx
    }

    /// Nearest-neighbour upsampling rows from the coarser `coarse` layout.
    fn upsample_rows(&self, coarse: &Layout) -> Vec<Option<usize>> {
        let mut idx = Vec::new();
        for (&len, &off) in self.lens.iter().zip(&coarse.offsets) {
            for j in 0..len {
                idx.push(Some(off + j / 2));
            }
        }
        idx
    }

    fn mean_pool(&self) -> Tensor {
        let total = self.total();
        let mut m = vec![0.0; self.lens.len() * total];
        for (s, (&len, &off)) in self.lens.iter().zip(&self.offsets).enumerate() {
            for r in off..off + len {
                m[s * total + r] = 1.0 / len as f64;
            }
        }
        Tensor::matrix(self.lens.len(), total, m).expect("pool shape")
    }
}

impl TrajectoryEmbedder {
    pub fn new(init: &mut Init, width: usize) -> Self {
        Self {
            lift: Linear::new(init, "embed.traj.lift", STEP_FEATURES, width),
            down1: Linear::new(init, "embed.traj.down1", 3 * width, width),
            down2: Linear::new(init, "embed.traj.down2", 3 * width, width),
            lateral: [
                Linear::new(init, "embed.traj.lateral0", width, width),
                Linear::new(init, "embed.traj.lateral1", width, width),
                Linear::new(init, "embed.traj.lateral2", width, width),
            ],
        }
    }

    fn down(&self, g: &mut Graph, conv: &Linear, x: Var, layout: &Layout) -> Result<Var> {
        let width = conv.output;
        let rows = layout.conv_rows();
        let n_out = rows.len() / 3;
        let cols = g.gather_rows(x, &rows)?;
        let cols = g.reshape(cols, &[n_out, 3 * width])?;
        let h = conv.forward(g, cols)?;
        Ok(g.gelu(h))
    }

    /// One `D`-row per segment. Empty segments produce a row that callers
    /// must treat as invalid.
    pub fn embed_many(&self, g: &mut Graph, segs: &[Segment], coord_scale: f64, total_steps: usize) -> Result<Var> {
        let width = self.lift.output;
        let l0 = Layout::new(segs.iter().map(|s| s.steps.len()).collect());
        if l0.total() == 0 {
            return Ok(g.constant(Tensor::zeros(&[segs.len(), width])));
        }
        let mut feats = Vec::with_capacity(l0.total() * STEP_FEATURES);
        for s in segs {
            for &(i, p) in s.steps {
                feats.extend_from_slice(&[
                    p[0] / coord_scale,
                    p[1] / coord_scale,
                    (s.time_offset + i) as f64 / total_steps as f64,
                    1.0,
                ]);
            }
        }
        let f = g.constant(Tensor::matrix(l0.total(), STEP_FEATURES, feats)?);
        let h0 = self.lift.forward(g, f)?;
        let h0 = g.gelu(h0);
        let l1 = l0.halved();
        let h1 = self.down(g, &self.down1, h0, &l0)?;
        let l2 = l1.halved();
        let h2 = self.down(g, &self.down2, h1, &l1)?;

        let p2 = self.lateral[2].forward(g, h2)?;
        let up2 = g.gather_rows(p2, &l1.upsample_rows(&l2))?;
        let p1 = self.lateral[1].forward(g, h1)?;
        let p1 = g.add(p1, up2)?;
        let up1 = g.gather_rows(p1, &l0.upsample_rows(&l1))?;
        let p0 = self.lateral[0].forward(g, h0)?;
        let p0 = g.add(p0, up1)?;

        let pool = g.constant(l0.mean_pool());
        g.matmul(pool, p0)
    }
}

#[derive(Debug, Clone)]
pub struct LaneEmbedder {
    pub point1: Linear,
    pub point2: Linear,
}

impl LaneEmbedder {
    pub fn new(init: &mut Init, width: usize) -> Self {
        Self {
            point1: Linear::new(init, "embed.lane.point1", STEP_FEATURES, width),
            point2: Linear::new(init, "embed.lane.point2", width, width),
        }
    }

    /// One `D`-row per lane; each waypoint carries its index within a lane of
    /// `lane_points` points.
    pub fn embed_many(&self, g: &mut Graph, lanes: &[&Steps], coord_scale: f64, lane_points: usize) -> Result<Var> {
        let width = self.point1.output;
        let total: usize = lanes.iter().map(|l| l.len()).sum();
        if total == 0 {
            return Ok(g.constant(Tensor::zeros(&[lanes.len(), width])));
        }
        let denom = lane_points.saturating_sub(1).max(1) as f64;
        let mut feats = Vec::with_capacity(total * STEP_FEATURES);
        for l in lanes {
            for &(i, p) in l.iter() {
                feats.extend_from_slice(&[p[0] / coord_scale, p[1] / coord_scale, i as f64 / denom, 1.0]);
            }
        }
        let f = g.constant(Tensor::matrix(total, STEP_FEATURES, feats)?);
        let h = self.point1.forward(g, f)?;
        let h = g.gelu(h);
        let h = self.point2.forward(g, h)?;
        let mut rows = Vec::with_capacity(lanes.len());
        let mut off = 0;
        for l in lanes {
            let r = if l.is_empty() {
                g.constant(Tensor::zeros(&[1, width]))
            } else {
                let idx: Vec<usize> = (off..off + l.len()).collect();
                let part = g.select_rows(h, &idx)?;
                g.max_rows(part)?
            };
            rows.push(r);
            off += l.len();
        }
        g.concat_rows(&rows)
    }
}

/// Token sequence `[history_1..N, future_1..N, lane_1..Z] + PE` for one branch.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    /// Whether each token has content and belongs to a real agent or lane.
    pub valid: Vec<bool>,
    /// Positional-table row of each token.
    pub slots: Vec<usize>,
    pub n_agents: usize,
    pub n_lanes: usize,
    pub branch: Branch,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Embedders plus the positional table.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub trajectory: TrajectoryEmbedder,
    pub lane: LaneEmbedder,
    pub positional: ParamId,
    pub cfg: ModelConfig,
}

impl Embedder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            trajectory: TrajectoryEmbedder::new(init, cfg.width),
            lane: LaneEmbedder::new(init, cfg.width),
            positional: init.embedding("pe", &[cfg.slot_count(), cfg.width], PE_STD),
            cfg: cfg.clone(),
        }
    }

    pub fn history_slot(&self, n: usize) -> usize {
        n
    }

    pub fn future_slot(&self, n: usize) -> usize {
        self.cfg.max_agents + n
    }

    pub fn lane_slot(&self, z: usize) -> usize {
        2 * self.cfg.max_agents + z
    }

    fn check_capacity(&self, n: usize, z: usize) -> Result<()> {
        if n > self.cfg.max_agents || z > self.cfg.max_lanes {
            return Err(Error::Config(alloc::format!(
                "scene with {n} agents and {z} lanes exceeds capacity {} / {}",
                self.cfg.max_agents,
                self.cfg.max_lanes
            )));
        }
        Ok(())
    }

    /// Single trajectory fragment to a `1 x D` row.
    pub fn embed_trajectory(&self, g: &mut Graph, seg: Segment) -> Result<Var> {
        if seg.steps.is_empty() {
            return Err(Error::Scene("cannot embed an empty trajectory".into()));
        }
        self.trajectory.embed_many(g, &[seg], self.cfg.coord_scale, self.cfg.horizon.total())
    }

    /// Single lane fragment to a `1 x D` row.
    pub fn embed_lane(&self, g: &mut Graph, points: &Steps) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::Scene("cannot embed an empty lane".into()));
        }
        self.lane.embed_many(g, &[points], self.cfg.coord_scale, self.cfg.lane_points)
    }

    fn add_positional(&self, g: &mut Graph, tokens: Var, slots: &[usize]) -> Result<Var> {
        let pe = g.param(self.positional);
        let rows = g.select_rows(pe, slots)?;
        g.add(tokens, rows)
    }

    /// Pre-training token sequence for one branch, length `N + N + Z`.
    pub fn assemble(
        &self,
        g: &mut Graph,
        views: &TokenViews,
        agent_valid: &[bool],
        lane_valid: &[bool],
        branch: Branch,
    ) -> Result<TokenBatch> {
        let n = views.history.len();
        let z = views.lanes.len();
        if views.future.len() != n || agent_valid.len() != n || lane_valid.len() != z {
            return Err(Error::Mask("token views and validity flags disagree in size".into()));
        }
        self.check_capacity(n, z)?;
        let th = self.cfg.horizon.history;
        let mut segs: Vec<Segment> = views.history.iter().map(|s| Segment { steps: s, time_offset: 0 }).collect();
        segs.extend(views.future.iter().map(|s| Segment { steps: s, time_offset: th }));
        let traj = self.trajectory.embed_many(g, &segs, self.cfg.coord_scale, self.cfg.horizon.total())?;
        let lane_refs: Vec<&Steps> = views.lanes.iter().collect();
        let lanes = self.lane.embed_many(g, &lane_refs, self.cfg.coord_scale, self.cfg.lane_points)?;
        let tokens = g.concat_rows(&[traj, lanes])?;

        let slots: Vec<usize> = (0..n)
            .map(|i| self.history_slot(i))
            .chain((0..n).map(|i| self.future_slot(i)))
            .chain((0..z).map(|i| self.lane_slot(i)))
            .collect();
        let tokens = self.add_positional(g, tokens, &slots)?;
        let valid = views
            .history
            .iter()
            .zip(agent_valid)
            .chain(views.future.iter().zip(agent_valid))
            .chain(views.lanes.iter().zip(lane_valid))
            .map(|(s, &ok)| ok && !s.is_empty())
            .collect();
        Ok(TokenBatch { tokens, valid, slots, n_agents: n, n_lanes: z, branch })
    }

    /// Fine-tuning token sequence `[history_1..N, lane_1..Z] + PE`, length `N + Z`.
    pub fn assemble_observed(
        &self,
        g: &mut Graph,
        history: &[Steps],
        lanes: &[Steps],
        agent_valid: &[bool],
        lane_valid: &[bool],
    ) -> Result<TokenBatch> {
        let (n, z) = (history.len(), lanes.len());
        if agent_valid.len() != n || lane_valid.len() != z {
            return Err(Error::Mask("validity flags disagree with token counts".into()));
        }
        self.check_capacity(n, z)?;
        let segs: Vec<Segment> = history.iter().map(|s| Segment { steps: s, time_offset: 0 }).collect();
        let traj = self.trajectory.embed_many(g, &segs, self.cfg.coord_scale, self.cfg.horizon.total())?;
        let lane_refs: Vec<&Steps> = lanes.iter().collect();
        let lane_tok = self.lane.embed_many(g, &lane_refs, self.cfg.coord_scale, self.cfg.lane_points)?;
        let tokens = g.concat_rows(&[traj, lane_tok])?;
        let slots: Vec<usize> =
            (0..n).map(|i| self.history_slot(i)).chain((0..z).map(|i| self.lane_slot(i))).collect();
        let tokens = self.add_positional(g, tokens, &slots)?;
        let valid = history
            .iter()
            .zip(agent_valid)
            .chain(lanes.iter().zip(lane_valid))
            .map(|(s, &ok)| ok && !s.is_empty())
            .collect();
        Ok(TokenBatch { tokens, valid, slots, n_agents: n, n_lanes: z, branch: Branch::Visible })
    }
}
