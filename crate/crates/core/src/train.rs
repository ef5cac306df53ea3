//! Batching, per-scene objectives and optimiser steps for both training stages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::embed::Branch;
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, finetune_loss, motion_loss, pretrain_loss, select_winner, spatial_loss, FinetuneLossReport,
    MotionTargets, PretrainLossReport, SpatialTargets, DEFAULT_ALPHA, DEFAULT_HUBER_DELTA,
};
use crate::masking::{make_mask_plan, split_tokens, MaskPlan, MaskStyle, Steps};
use crate::metrics::{scene_metrics, MetricsReport, SceneMetrics, Worlds, DEFAULT_TAU};
use crate::model::{Anchors, ForecastModel, PretrainModel, WorldsVar};
use crate::numerics::{fill_missing_grads, AdamW, Gradients, Graph, Mode, ParamStore, RngState, Tensor};
use crate::scene::{speeds, AgentTrack, LaneSegment, Point, Scene};

const TAG_MASK: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_INIT: u64 = 4;

/// Which pre-training objectives contribute; alignment is controlled by `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Heads {
    pub spatial: bool,
    pub motion: bool,
}

impl Default for Heads {
    fn default() -> Self {
        Self { spatial: true, motion: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    pub alpha: f64,
    pub heads: Heads,
    pub mask_style: MaskStyle,
    /// Draw each scene's mask plan once from its content instead of at every step.
    pub fixed_masks: bool,
    pub huber_delta: f64,
    pub tau: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 100,
            max_steps: None,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-2,
            cosine: false,
            alpha: DEFAULT_ALPHA,
            heads: Heads::default(),
            mask_style: MaskStyle::Random,
            fixed_masks: false,
            huber_delta: DEFAULT_HUBER_DELTA,
            tau: DEFAULT_TAU,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad(format!("invalid optimiser settings lr={} wd={} clip={}", self.lr, self.weight_decay, self.clip_norm));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.alpha == 0.0 && !self.heads.spatial && !self.heads.motion {
            return bad("at least one pre-training objective must be enabled".into());
        }
        if !(self.huber_delta > 0.0) || !(self.tau >= 0.0) {
            return bad("huber delta must be positive and tau nonnegative".into());
        }
        Ok(())
    }

    /// Learning rate at optimiser step `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let frac = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }

    /// Steps the run will take for a dataset of `scenes` scenes.
    pub fn total_steps(&self, scenes: usize) -> u64 {
        let per_epoch = scenes.div_ceil(self.batch_size) as u64;
        let full = per_epoch * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// A scene padded with inert agents and lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedScene {
    pub scene: Scene,
    pub agent_valid: Vec<bool>,
    pub lane_valid: Vec<bool>,
}

impl PaddedScene {
    pub fn real_agents(&self) -> Vec<usize> {
        (0..self.agent_valid.len()).filter(|&i| self.agent_valid[i]).collect()
    }

    pub fn real_lanes(&self) -> Vec<usize> {
        (0..self.lane_valid.len()).filter(|&i| self.lane_valid[i]).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.real_agents().into_iter().filter(|&i| self.scene.agents[i].is_target).collect()
    }

    /// The original scene without padding.
    pub fn unpadded(&self) -> Scene {
        let mut s = self.scene.clone();
        s.agents = self.real_agents().into_iter().map(|i| self.scene.agents[i].clone()).collect();
        s.lanes = self.real_lanes().into_iter().map(|i| self.scene.lanes[i].clone()).collect();
        s
    }
}

/// Pads `scene` to `agents` agents and `lanes` lanes.
pub fn pad_scene(scene: &Scene, agents: usize, lanes: usize) -> PaddedScene {
    let (n, z) = (scene.num_agents(), scene.num_lanes());
    let t = scene.horizon.total();
    let w = scene.lanes.first().map_or(2, |l| l.waypoints.len());
    let mut s = scene.clone();
    s.agents.extend((n..agents).map(|_| AgentTrack {
        positions: vec![[0.0; 2]; t],
        headings: vec![0.0; t],
        is_target: false,
    }));
    s.lanes.extend((z..lanes).map(|_| LaneSegment { waypoints: vec![[0.0; 2]; w] }));
    PaddedScene {
        scene: s,
        agent_valid: (0..agents.max(n)).map(|i| i < n).collect(),
        lane_valid: (0..lanes.max(z)).map(|i| i < z).collect(),
    }
}

/// Consecutive batches padded to the largest agent and lane counts in each.
pub fn batch_scenes(scenes: &[Scene], batch_size: usize) -> Vec<Vec<PaddedScene>> {
    scenes
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let n = chunk.iter().map(Scene::num_agents).max().unwrap_or(0);
            let z = chunk.iter().map(Scene::num_lanes).max().unwrap_or(0);
            chunk.iter().map(|s| pad_scene(s, n, z)).collect()
        })
        .collect()
}

/// Checks that `scene` fits the model's fixed horizon, lane resolution and capacity.
pub fn check_scene(scene: &Scene, cfg: &ModelConfig) -> Result<()> {
    if scene.horizon != cfg.horizon {
        return Err(Error::Config(format!(
            "scene horizon {}+{} differs from model horizon {}+{}",
            scene.horizon.history, scene.horizon.future, cfg.horizon.history, cfg.horizon.future
        )));
    }
    if let Some((z, l)) = scene.lanes.iter().enumerate().find(|(_, l)| l.waypoints.len() != cfg.lane_points) {
        return Err(Error::Config(format!(
            "lanes[{z}] has {} waypoints, model expects {}",
            l.waypoints.len(),
            cfg.lane_points
        )));
    }
    if scene.num_agents() > cfg.max_agents || scene.num_lanes() > cfg.max_lanes {
        return Err(Error::Config(format!(
            "scene with {} agents and {} lanes exceeds capacity {} / {}",
            scene.num_agents(),
            scene.num_lanes(),
            cfg.max_agents,
            cfg.max_lanes
        )));
    }
    Ok(())
}

/// Samples a mask plan for the real part of `padded`; padding receives
/// placeholder masks with the same per-row counts.
pub fn padded_plan(padded: &PaddedScene, cfg: &TrainConfig, rng: &mut RngState) -> Result<MaskPlan> {
    let real = padded.unpadded();
    let mut plan = make_mask_plan(&real, cfg.model.ratios, cfg.mask_style, rng)?;
    let fill = |len: usize, count: usize| (0..len).map(|i| i < count).collect::<Vec<bool>>();
    let (th, tf) = (padded.scene.horizon.history, padded.scene.horizon.future);
    let (mut h, mut f, mut l) = (Vec::new(), Vec::new(), Vec::new());
    let (mut hi, mut li) = (plan.history.drain(..), plan.lanes.drain(..));
    let mut fi = plan.future.drain(..);
    for &ok in &padded.agent_valid {
        if ok {
            h.push(hi.next().expect("agent plan"));
            f.push(fi.next().expect("agent plan"));
        } else {
            h.push(fill(th, cfg.model.masked_history()));
            f.push(fill(tf, cfg.model.masked_future()));
        }
    }
    for (z, &ok) in padded.lane_valid.iter().enumerate() {
        if ok {
            l.push(li.next().expect("lane plan"));
        } else {
            let w = padded.scene.lanes[z].waypoints.len();
            l.push(fill(w, cfg.model.masked_lane_points()));
        }
    }
    drop((hi, fi, li));
    Ok(MaskPlan { ratios: plan.ratios, history: h, future: f, lanes: l })
}

fn flatten_rows(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Mask(format!("row {i}: {} masked values, head expects {width}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), width, data)
}

fn coords(steps: &Steps) -> Vec<f64> {
    steps.iter().flat_map(|(_, p)| p.iter().copied()).collect()
}

/// Masked coordinates and masked-step speeds, row-aligned with the decoder slots.
pub fn pretrain_targets(scene: &Scene, plan: &MaskPlan, cfg: &ModelConfig) -> Result<(SpatialTargets, MotionTargets)> {
    let (_, masked) = split_tokens(scene, plan)?;
    let th = scene.horizon.history;
    let spatial = SpatialTargets {
        history: flatten_rows(&masked.history.iter().map(coords).collect::<Vec<_>>(), 2 * cfg.masked_history())?,
        future: flatten_rows(&masked.future.iter().map(coords).collect::<Vec<_>>(), 2 * cfg.masked_future())?,
        lanes: flatten_rows(&masked.lanes.iter().map(coords).collect::<Vec<_>>(), 2 * cfg.masked_lane_points())?,
    };
    let mut hist = Vec::new();
    let mut fut = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        let v = speeds(&a.positions);
        hist.push(masked.history[i].iter().map(|(t, _)| v[*t]).collect());
        fut.push(masked.future[i].iter().map(|(t, _)| v[th + *t]).collect());
    }
    let motion = MotionTargets {
        history: flatten_rows(&hist, cfg.masked_history())?,
        future: flatten_rows(&fut, cfg.masked_future())?,
    };
    Ok((spatial, motion))
}

/// Pre-training loss of one scene under `plan`, with parameter gradients.
pub fn pretrain_scene(
    model: &PretrainModel,
    store: &ParamStore,
    padded: &PaddedScene,
    plan: &MaskPlan,
    cfg: &TrainConfig,
    mode: Mode,
    rng: RngState,
) -> Result<(PretrainLossReport, Gradients)> {
    let mut g = Graph::new(store, mode, rng);
    let (report, total) = pretrain_forward(model, &mut g, padded, plan, cfg)?;
    let grads = g.backward(total)?.params(store);
    Ok((report, grads))
}

struct Regressed {
    anchors: Anchors,
    masked_valid: Vec<bool>,
    e_m: crate::numerics::Var,
    r_m: crate::numerics::Var,
}

fn regress(model: &PretrainModel, g: &mut Graph, padded: &PaddedScene, plan: &MaskPlan) -> Result<Regressed> {
    let (vis, msk) = split_tokens(&padded.scene, plan)?;
    let embed = &model.backbone.embed;
    let tv = embed.assemble(g, &vis, &padded.agent_valid, &padded.lane_valid, Branch::Visible)?;
    let tm = embed.assemble(g, &msk, &padded.agent_valid, &padded.lane_valid, Branch::Masked)?;
    let e_v = model.backbone.encode(g, &tv)?;
    let e_m = model.backbone.encode(g, &tm)?;
    let e_m = g.detach(e_m);
    let r_m = model.regressor.forward(g, e_v, &tv.valid, &tm.slots)?;
    Ok(Regressed { anchors: Anchors::from_visible(&vis), masked_valid: tm.valid, e_m, r_m })
}

fn pretrain_forward(
    model: &PretrainModel,
    g: &mut Graph,
    padded: &PaddedScene,
    plan: &MaskPlan,
    cfg: &TrainConfig,
) -> Result<(PretrainLossReport, crate::numerics::Var)> {
    let scene = &padded.scene;
    let (n, z) = (scene.num_agents(), scene.num_lanes());
    let Regressed { anchors, masked_valid, e_m, r_m } = regress(model, g, padded, plan)?;
    let tm_valid = &masked_valid;
    let slots: Vec<usize> = (0..tm_valid.len()).filter(|&i| tm_valid[i]).collect();
    let la = alignment_loss(g, r_m, e_m, &slots)?;
    let (spatial_t, motion_t) = pretrain_targets(scene, plan, &cfg.model)?;
    let agents = padded.real_agents();
    let lanes = padded.real_lanes();
    let zero = g.constant(Tensor::scalar(0.0));
    let ls = if cfg.heads.spatial {
        let out = model.spatial.forward(g, r_m, tm_valid, &anchors)?;
        spatial_loss(g, &out, &spatial_t, &agents, &lanes)?
    } else {
        zero
    };
    let lm = if cfg.heads.motion {
        let out = model.motion.forward(g, r_m, tm_valid, n, z)?;
        motion_loss(g, &out, &motion_t, &agents)?
    } else {
        zero
    };
    let weighted = g.scale(la, cfg.alpha);
    let total = g.add(weighted, ls)?;
    let total = g.add(total, lm)?;
    let report = pretrain_loss(cfg.alpha, g.value(la).item(), g.value(ls).item(), g.value(lm).item())?;
    Ok((report, total))
}

/// Decoded masked content of one scene, in meters and m/s, ordered like the
/// masked indices of `plan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub history: Vec<Vec<Point>>,
    pub future: Vec<Vec<Point>>,
    pub lanes: Vec<Vec<Point>>,
    pub history_speed: Vec<Vec<f64>>,
    pub future_speed: Vec<Vec<f64>>,
    /// Mean absolute coordinate error over every reconstructed value.
    pub spatial_l1: f64,
}

fn points(t: &Tensor) -> Vec<Vec<Point>> {
    (0..t.rows()).map(|r| t.row_slice(r).chunks_exact(2).map(|c| [c[0], c[1]]).collect()).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Runs both decoders on `scene` under `plan` without dropout.
pub fn reconstruct(model: &PretrainModel, store: &ParamStore, scene: &Scene, plan: &MaskPlan) -> Result<Reconstruction> {
    check_scene(scene, &model.cfg)?;
    let padded = pad_scene(scene, scene.num_agents(), scene.num_lanes());
    let (n, z) = (scene.num_agents(), scene.num_lanes());
    let mut g = Graph::new(store, Mode::Eval, RngState::new(0));
    let r = regress(model, &mut g, &padded, plan)?;
    let sp = model.spatial.forward(&mut g, r.r_m, &r.masked_valid, &r.anchors)?;
    let mo = model.motion.forward(&mut g, r.r_m, &r.masked_valid, n, z)?;
    let (truth, _) = pretrain_targets(scene, plan, &model.cfg)?;
    let mut err = 0.0;
    let mut count = 0usize;
    for (pred, tgt) in [(sp.history, &truth.history), (sp.future, &truth.future), (sp.lanes, &truth.lanes)] {
        for (a, b) in g.value(pred).data().iter().zip(tgt.data()) {
            err += (a - b).abs();
            count += 1;
        }
    }
    Ok(Reconstruction {
        history: points(g.value(sp.history)),
        future: points(g.value(sp.future)),
        lanes: points(g.value(sp.lanes)),
        history_speed: rows(g.value(mo.history)),
        future_speed: rows(g.value(mo.future)),
        spatial_l1: if count == 0 { 0.0 } else { err / count as f64 },
    })
}

/// Summary of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

fn scene_rng(seed: u64, tag: u64, step: u64, slot: usize) -> RngState {
    RngState::derive(seed, &[tag, step, slot as u64])
}

/// FNV-1a over every coordinate bit pattern of the scene.
pub fn scene_key(scene: &Scene) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let points = scene.agents.iter().flat_map(|a| a.positions.iter()).chain(scene.lanes.iter().flat_map(|l| l.waypoints.iter()));
    for p in points {
        for c in p {
            for b in c.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Mask plans used for batch `step`, one per scene.
pub fn batch_plans(batch: &[PaddedScene], cfg: &TrainConfig, step: u64) -> Result<Vec<MaskPlan>> {
    batch
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut rng = if cfg.fixed_masks {
                RngState::derive(cfg.seed, &[TAG_MASK, scene_key(&p.unpadded())])
            } else {
                scene_rng(cfg.seed, TAG_MASK, step, j)
            };
            padded_plan(p, cfg, &mut rng)
        })
        .collect()
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("{what} became {v}") })
    }
}

fn apply(
    store: &mut ParamStore,
    opt: &mut AdamW,
    grads: &Gradients,
    cfg: &TrainConfig,
    step: u64,
    total_steps: u64,
) -> Result<StepStats> {
    store.zero_grad();
    store.accumulate(grads);
    let grad_norm = store.clip_grad_norm(cfg.clip_norm);
    check_finite(step, "gradient norm", grad_norm)?;
    fill_missing_grads(store);
    let lr = cfg.lr_at(step, total_steps);
    opt.step(store, lr, cfg.weight_decay)?;
    if !store.all_finite() {
        return Err(Error::Diverged { step, detail: "non-finite parameter after update".into() });
    }
    Ok(StepStats { step, lr, grad_norm, clipped: grad_norm > cfg.clip_norm })
}

/// Mean pre-training loss and gradients over a batch.
pub fn pretrain_batch(
    model: &PretrainModel,
    store: &ParamStore,
    batch: &[PaddedScene],
    cfg: &TrainConfig,
    step: u64,
    mode: Mode,
) -> Result<(PretrainLossReport, Gradients)> {
    let plans = batch_plans(batch, cfg, step)?;
    let mut grads = Gradients::empty(store.len());
    let (mut la, mut ls, mut lm) = (0.0, 0.0, 0.0);
    for (j, (p, plan)) in batch.iter().zip(&plans).enumerate() {
        let rng = scene_rng(cfg.seed, TAG_DROPOUT, step, j);
        let (r, g) = pretrain_scene(model, store, p, plan, cfg, mode, rng)?;
        la += r.l_align;
        ls += r.l_spatial;
        lm += r.l_motion;
        grads.add(&g);
    }
    let b = batch.len().max(1) as f64;
    grads.scale(1.0 / b);
    let report = pretrain_loss(cfg.alpha, la / b, ls / b, lm / b)?;
    check_finite(step, "pre-training loss", report.total)?;
    Ok((report, grads))
}

fn observed(scene: &Scene) -> (Vec<Steps>, Vec<Steps>, Vec<Point>) {
    let th = scene.horizon.history;
    let history = scene.agents.iter().map(|a| a.positions[..th].iter().copied().enumerate().collect()).collect();
    let lanes = scene.lanes.iter().map(|l| l.waypoints.iter().copied().enumerate().collect()).collect();
    let last = scene.agents.iter().map(|a| a.positions[th - 1]).collect();
    (history, lanes, last)
}

/// Encodes the observed part of `padded` and emits `K` worlds.
pub fn forecast_forward(model: &ForecastModel, g: &mut Graph, padded: &PaddedScene) -> Result<WorldsVar> {
    let (history, lanes, last) = observed(&padded.scene);
    let tokens =
        model.backbone.embed.assemble_observed(g, &history, &lanes, &padded.agent_valid, &padded.lane_valid)?;
    let z_e = model.backbone.encode(g, &tokens)?;
    let mut targets = padded.targets();
    if targets.is_empty() {
        targets = padded.real_agents();
    }
    model.generator.forward(g, z_e, &last, &targets)
}

/// Converts generator output to `worlds[k][n][t]`.
pub fn to_worlds(t: &Tensor, modes: usize, agents: usize) -> Worlds {
    (0..modes)
        .map(|k| {
            (0..agents)
                .map(|n| t.row_slice(k * agents + n).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
                .collect()
        })
        .collect()
}

fn future_truth(scene: &Scene) -> Vec<Vec<Point>> {
    (0..scene.num_agents()).map(|n| scene.future(n).to_vec()).collect()
}

/// Fine-tuning loss of one scene with parameter gradients.
pub fn finetune_scene(
    model: &ForecastModel,
    store: &ParamStore,
    padded: &PaddedScene,
    cfg: &TrainConfig,
    mode: Mode,
    rng: RngState,
) -> Result<(FinetuneLossReport, Gradients)> {
    let mut g = Graph::new(store, mode, rng);
    let worlds = forecast_forward(model, &mut g, padded)?;
    let targets = padded.targets();
    let truth = future_truth(&padded.scene);
    let f = to_worlds(g.value(worlds.trajectories), worlds.modes, worlds.agents);
    let k_star = select_winner(&f, &truth, &targets)?;
    let loss = finetune_loss(&mut g, &worlds, &truth, &targets, k_star, cfg.huber_delta)?;
    let grads = g.backward(loss.total)?.params(store);
    Ok((loss.report(&g), grads))
}

/// Mean fine-tuning loss over a batch; `k_star` is that of the first scene.
pub fn finetune_batch(
    model: &ForecastModel,
    store: &ParamStore,
    batch: &[PaddedScene],
    cfg: &TrainConfig,
    step: u64,
    mode: Mode,
) -> Result<(FinetuneLossReport, Gradients)> {
    let mut grads = Gradients::empty(store.len());
    let mut acc = FinetuneLossReport { k_star: 0, l_huber: 0.0, l_ce: 0.0, total: 0.0 };
    for (j, p) in batch.iter().enumerate() {
        let rng = scene_rng(cfg.seed, TAG_DROPOUT, step, j);
        let (r, g) = finetune_scene(model, store, p, cfg, mode, rng)?;
        if j == 0 {
            acc.k_star = r.k_star;
        }
        acc.l_huber += r.l_huber;
        acc.l_ce += r.l_ce;
        acc.total += r.total;
        grads.add(&g);
    }
    let b = batch.len().max(1) as f64;
    grads.scale(1.0 / b);
    acc.l_huber /= b;
    acc.l_ce /= b;
    acc.total /= b;
    check_finite(step, "fine-tuning loss", acc.total)?;
    Ok((acc, grads))
}

/// Predicted worlds for the real agents of a scene with softmaxed mode scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub worlds: Worlds,
    pub scores: Vec<f64>,
}

pub fn predict(model: &ForecastModel, store: &ParamStore, scene: &Scene) -> Result<Prediction> {
    check_scene(scene, &model.cfg)?;
    let padded = pad_scene(scene, scene.num_agents(), scene.num_lanes());
    let mut g = Graph::new(store, Mode::Eval, RngState::new(0));
    let w = forecast_forward(model, &mut g, &padded)?;
    let worlds = to_worlds(g.value(w.trajectories), w.modes, w.agents);
    let logits = g.value(w.logits).data();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let s: f64 = e.iter().sum();
    Ok(Prediction { worlds, scores: e.iter().map(|x| x / s).collect() })
}

pub fn evaluate_scene(model: &ForecastModel, store: &ParamStore, scene: &Scene, tau: f64) -> Result<SceneMetrics> {
    let p = predict(model, store, scene)?;
    scene_metrics(&p.worlds, &future_truth(scene), &scene.target_indices(), tau)
}

pub fn evaluate(model: &ForecastModel, store: &ParamStore, scenes: &[Scene], tau: f64) -> Result<MetricsReport> {
    let per_scene = scenes.iter().map(|s| evaluate_scene(model, store, s, tau)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::aggregate(per_scene, tau))
}

/// Generator for model initialisation under `seed`.
pub fn init_rng(seed: u64) -> RngState {
    RngState::derive(seed, &[TAG_INIT])
}

/// Generator for epoch shuffling under `seed`.
pub fn shuffle_rng(seed: u64) -> RngState {
    RngState::derive(seed, &[TAG_SHUFFLE])
}

/// Scene visiting order for the next epoch.
pub fn epoch_order(rng: &mut RngState, scenes: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scenes).collect();
    rng.shuffle(&mut idx);
    idx
}

/// The training stage a model and checkpoint belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

/// A trainable model with its batch objective.
pub trait Stage: Sized {
    type Report: Copy + Serialize;
    const KIND: StageKind;

    fn build(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore)>;

    /// Mean loss and gradients over `batch` at optimiser step `step`.
    fn batch(
        &self,
        store: &ParamStore,
        batch: &[PaddedScene],
        cfg: &TrainConfig,
        step: u64,
        mode: Mode,
    ) -> Result<(Self::Report, Gradients)>;
}

impl Stage for PretrainModel {
    type Report = PretrainLossReport;
    const KIND: StageKind = StageKind::Pretrain;

    fn build(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore)> {
        PretrainModel::new(cfg, rng)
    }

    fn batch(
        &self,
        store: &ParamStore,
        batch: &[PaddedScene],
        cfg: &TrainConfig,
        step: u64,
        mode: Mode,
    ) -> Result<(Self::Report, Gradients)> {
        pretrain_batch(self, store, batch, cfg, step, mode)
    }
}

impl Stage for ForecastModel {
    type Report = FinetuneLossReport;
    const KIND: StageKind = StageKind::Finetune;

    fn build(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore)> {
        ForecastModel::new(cfg, rng)
    }

    fn batch(
        &self,
        store: &ParamStore,
        batch: &[PaddedScene],
        cfg: &TrainConfig,
        step: u64,
        mode: Mode,
    ) -> Result<(Self::Report, Gradients)> {
        finetune_batch(self, store, batch, cfg, step, mode)
    }
}

/// One optimiser step of either stage on `batch`.
pub fn train_step<S: Stage>(
    model: &S,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[PaddedScene],
    cfg: &TrainConfig,
    step: u64,
    total_steps: u64,
) -> Result<(S::Report, StepStats)> {
    let (report, grads) = model.batch(store, batch, cfg, step, Mode::Train)?;
    let stats = apply(store, opt, &grads, cfg, step, total_steps)?;
    Ok((report, stats))
}
