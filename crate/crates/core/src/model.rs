//! Encoder, context regressor, spatial/motion decoders and the multi-world generator.

use alloc::format;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::embed::{Embedder, TokenBatch};
use crate::masking::{Steps, TokenViews};
use crate::error::{Error, Result};
use crate::nn::{CrossBlock, Init, LayerNorm, Linear, Stack};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};
use crate::scene::Point;

/// Parameter-name prefixes carried over from pre-training to fine-tuning.
pub const TRANSFER_PREFIXES: [&str; 3] = ["embed.", "encoder.", "pe"];
/// Initial spread of the mask-query and mode tables.
pub const EMBED_STD: f64 = 0.02;

/// Embedders, positional table and the shared encoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub embed: Embedder,
    pub encoder: Stack,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let embed = Embedder::new(init, cfg);
        let encoder = Stack::new(init, "encoder", cfg.encoder_depth, cfg.block_dims());
        Self { embed, encoder }
    }

    /// Full self-attention over the token sequence. Both pre-training
    /// branches call this with the same parameters.
    pub fn encode(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<Var> {
        let width = g.value(tokens.tokens).cols();
        if width != self.embed.cfg.width {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("token width {width}, model width {}", self.embed.cfg.width),
            });
        }
        self.encoder.forward(g, tokens.tokens, &tokens.valid)
    }
}

/// Cross-attention stack mapping visible context to masked-slot representations.
/// Each slot's query is its learnable row plus the slot's shared positional row.
#[derive(Debug, Clone)]
pub struct Regressor {
    pub queries: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub norm: LayerNorm,
}

impl Regressor {
    pub fn new(init: &mut Init, cfg: &ModelConfig, positional: ParamId) -> Self {
        let queries = init.embedding("regressor.queries", &[cfg.slot_count(), cfg.width], EMBED_STD);
        let blocks = (0..cfg.regressor_depth)
            .map(|i| CrossBlock::new(init, &format!("regressor.layers.{i}"), cfg.block_dims()))
            .collect();
        Self { queries, positional, blocks, norm: LayerNorm::new(init, "regressor.norm", cfg.width) }
    }

    /// `R_m`: one row per slot in `slots`, attending over `context`.
    pub fn forward(&self, g: &mut Graph, context: Var, context_valid: &[bool], slots: &[usize]) -> Result<Var> {
        let table = g.param(self.queries);
        let rows = g.value(table).rows();
        if let Some(&bad) = slots.iter().find(|&&s| s >= rows) {
            return Err(Error::Shape { op: "regress", detail: format!("slot {bad} beyond query table of {rows}") });
        }
        let q = g.select_rows(table, slots)?;
        let pe = g.param(self.positional);
        let pe = g.select_rows(pe, slots)?;
        let mut q = g.add(q, pe)?;
        for b in &self.blocks {
            q = b.forward(g, q, context, context_valid)?;
        }
        self.norm.forward(g, q)
    }
}

/// Spatial reconstructions in meters: masked coordinates flattened `(x, y)` per step.
#[derive(Debug, Clone, Copy)]
pub struct SpatialOutput {
    /// `N x 2·c_h`
    pub history: Var,
    /// `N x 2·c_f`
    pub future: Var,
    /// `Z x 2·c_w`
    pub lanes: Var,
}

/// Per-slot reference points that spatial reconstructions are offsets from:
/// the centroid of each sequence's visible points, or the origin when none
/// are visible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Anchors {
    pub history: Vec<Point>,
    pub future: Vec<Point>,
    pub lanes: Vec<Point>,
}

impl Anchors {
    pub fn from_visible(visible: &TokenViews) -> Self {
        let centroid = |steps: &Steps| {
            if steps.is_empty() {
                return [0.0, 0.0];
            }
            let k = steps.len() as f64;
            let (x, y) = steps.iter().fold((0.0, 0.0), |(x, y), (_, p)| (x + p[0], y + p[1]));
            [x / k, y / k]
        };
        Self {
            history: visible.history.iter().map(centroid).collect(),
            future: visible.future.iter().map(centroid).collect(),
            lanes: visible.lanes.iter().map(centroid).collect(),
        }
    }
}

/// `rows x 2·count` matrix repeating each anchor `count` times.
fn tiled(anchors: &[Point], count: usize) -> Tensor {
    let data = anchors.iter().flat_map(|a| core::iter::repeat(*a).take(count).flatten()).collect();
    Tensor::matrix(anchors.len(), 2 * count, data).expect("anchor shape")
}

/// Speed predictions in m/s at masked steps.
#[derive(Debug, Clone, Copy)]
pub struct MotionOutput {
    /// `N x c_h`
    pub history: Var,
    /// `N x c_f`
    pub future: Var,
}

#[derive(Debug, Clone)]
pub struct SpatialDecoder {
    pub stack: Stack,
    pub history_head: Linear,
    pub future_head: Linear,
    pub lane_head: Linear,
    pub scale: f64,
}

impl SpatialDecoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        Self {
            stack: Stack::new(init, "decoder.spatial", cfg.spatial_depth, cfg.block_dims()),
            history_head: Linear::new(init, "decoder.spatial.history_head", d, 2 * cfg.masked_history()),
            future_head: Linear::new(init, "decoder.spatial.future_head", d, 2 * cfg.masked_future()),
            lane_head: Linear::new(init, "decoder.spatial.lane_head", d, 2 * cfg.masked_lane_points()),
            scale: cfg.coord_scale,
        }
    }

    /// `r_m` rows are ordered `[history N, future N, lanes Z]`.
    pub fn forward(&self, g: &mut Graph, r_m: Var, valid: &[bool], anchors: &Anchors) -> Result<SpatialOutput> {
        let (n, z) = (anchors.history.len(), anchors.lanes.len());
        check_slots(g, r_m, n, z)?;
        if anchors.future.len() != n {
            return Err(Error::Shape { op: "decode", detail: format!("{} future anchors for {n} agents", anchors.future.len()) });
        }
        let h = self.stack.forward(g, r_m, valid)?;
        let (hist, fut, lanes) = split_slots(g, h, n, z)?;
        let head = |g: &mut Graph, lin: &Linear, x: Var, a: &[Point]| -> Result<Var> {
            let y = lin.forward(g, x)?;
            let y = g.scale(y, self.scale);
            let base = g.constant(tiled(a, lin.output / 2));
            g.add(y, base)
        };
        Ok(SpatialOutput {
            history: head(g, &self.history_head, hist, &anchors.history)?,
            future: head(g, &self.future_head, fut, &anchors.future)?,
            lanes: head(g, &self.lane_head, lanes, &anchors.lanes)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MotionDecoder {
    pub stack: Stack,
    pub history_head: Linear,
    pub future_head: Linear,
    pub scale: f64,
}

impl MotionDecoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        Self {
            stack: Stack::new(init, "decoder.motion", cfg.motion_depth, cfg.block_dims()),
            history_head: Linear::new(init, "decoder.motion.history_head", d, cfg.masked_history()),
            future_head: Linear::new(init, "decoder.motion.future_head", d, cfg.masked_future()),
            scale: cfg.speed_scale,
        }
    }

    /// Lane slots take part in attention but have no motion head.
    pub fn forward(&self, g: &mut Graph, r_m: Var, valid: &[bool], n: usize, z: usize) -> Result<MotionOutput> {
        check_slots(g, r_m, n, z)?;
        let h = self.stack.forward(g, r_m, valid)?;
        let (hist, fut, _) = split_slots(g, h, n, z)?;
        let history = self.history_head.forward(g, hist)?;
        let future = self.future_head.forward(g, fut)?;
        Ok(MotionOutput { history: g.scale(history, self.scale), future: g.scale(future, self.scale) })
    }
}

fn check_slots(g: &Graph, x: Var, n: usize, z: usize) -> Result<()> {
    let rows = g.value(x).rows();
    if rows != 2 * n + z {
        return Err(Error::Shape { op: "decode", detail: format!("{rows} slots for {n} agents and {z} lanes") });
    }
    Ok(())
}

fn split_slots(g: &mut Graph, x: Var, n: usize, z: usize) -> Result<(Var, Var, Var)> {
    let hist: Vec<usize> = (0..n).collect();
    let fut: Vec<usize> = (n..2 * n).collect();
    let lanes: Vec<usize> = (2 * n..2 * n + z).collect();
    Ok((g.select_rows(x, &hist)?, g.select_rows(x, &fut)?, g.select_rows(x, &lanes)?))
}

/// Multi-world trajectory generator with a pooled score head.
#[derive(Debug, Clone)]
pub struct Generator {
    pub modes: ParamId,
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub out: Linear,
    pub score: Linear,
    pub future: usize,
    pub scale: f64,
}

/// Predicted worlds on the tape.
#[derive(Debug, Clone, Copy)]
pub struct WorldsVar {
    /// `(K·N) x (2·T_f)` positions in meters; row `k·N + n`.
    pub trajectories: Var,
    /// `1 x K` raw mode logits.
    pub logits: Var,
    pub modes: usize,
    pub agents: usize,
}

impl Generator {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.width, cfg.generator_hidden);
        Self {
            modes: init.embedding("generator.modes", &[cfg.modes, d], EMBED_STD),
            hidden1: Linear::new(init, "generator.hidden1", 2 * d, h),
            hidden2: Linear::new(init, "generator.hidden2", h, h),
            out: Linear::new(init, "generator.out", h, 2 * cfg.horizon.future),
            score: Linear::new(init, "generator.score", h, 1),
            future: cfg.horizon.future,
            scale: cfg.coord_scale,
        }
    }

    /// Emits `K` joint worlds from the scene context `z_e` (`N + Z` rows,
    /// agents first). Each trajectory is an offset from the agent's last
    /// observed position; logits pool mode-conditioned features over `targets`.
    pub fn forward(&self, g: &mut Graph, z_e: Var, last: &[Point], targets: &[usize]) -> Result<WorldsVar> {
        let n = last.len();
        if targets.is_empty() {
            return Err(Error::Loss("scene has no target agents".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Loss(format!("target {t} out of range for {n} agents")));
        }
        let table = g.param(self.modes);
        let k = g.value(table).rows();
        let agent_rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let mode_rows: Vec<usize> = (0..k).flat_map(|m| core::iter::repeat(m).take(n)).collect();
        let ctx = g.select_rows(z_e, &agent_rows)?;
        let ms = g.select_rows(table, &mode_rows)?;
        let x = g.concat_cols(&[ctx, ms])?;
        let h1 = self.hidden1.forward(g, x)?;
        let h1 = g.gelu(h1);
        let h2 = self.hidden2.forward(g, h1)?;
        let h2 = g.gelu(h2);
        let off = self.out.forward(g, h2)?;
        let off = g.scale(off, self.scale);
        let mut base = Vec::with_capacity(k * n * 2 * self.future);
        for _ in 0..k {
            for p in last {
                for _ in 0..self.future {
                    base.extend_from_slice(p);
                }
            }
        }
        let base = g.constant(Tensor::matrix(k * n, 2 * self.future, base)?);
        let trajectories = g.add(off, base)?;

        let s = self.score.forward(g, h1)?;
        let mut pool = alloc::vec![0.0; k * k * n];
        for m in 0..k {
            for &t in targets {
                pool[m * k * n + m * n + t] = 1.0 / targets.len() as f64;
            }
        }
        let pool = g.constant(Tensor::matrix(k, k * n, pool)?);
        let logits = g.matmul(pool, s)?;
        let logits = g.reshape(logits, &[1, k])?;
        Ok(WorldsVar { trajectories, logits, modes: k, agents: n })
    }
}

/// Encoder–regressor–decoder model used for self-supervised pre-training.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub regressor: Regressor,
    pub spatial: SpatialDecoder,
    pub motion: MotionDecoder,
}

impl PretrainModel {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let backbone = Backbone::new(&mut init, cfg);
        let regressor = Regressor::new(&mut init, cfg, backbone.embed.positional);
        let spatial = SpatialDecoder::new(&mut init, cfg);
        let motion = MotionDecoder::new(&mut init, cfg);
        Ok((Self { cfg: cfg.clone(), backbone, regressor, spatial, motion }, store))
    }
}

/// Encoder–generator model used for fine-tuning and inference.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub generator: Generator,
}

impl ForecastModel {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let backbone = Backbone::new(&mut init, cfg);
        let generator = Generator::new(&mut init, cfg);
        Ok((Self { cfg: cfg.clone(), backbone, generator }, store))
    }
}

/// Names copied and names left freshly initialised by [`transfer_backbone`].
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransferReport {
    pub transferred: Vec<alloc::string::String>,
    pub fresh: Vec<alloc::string::String>,
}

/// Copies every embedder, encoder and positional parameter of `source` into
/// `target` by name. Shapes must agree.
pub fn transfer_backbone(source: &ParamStore, target: &mut ParamStore) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let names: Vec<alloc::string::String> = target.names().map(Into::into).collect();
    for name in names {
        let is_backbone = TRANSFER_PREFIXES.iter().any(|p| name.starts_with(p));
        match (is_backbone, source.find(&name)) {
            (true, Some(id)) => {
                let value = source.value(id).clone();
                target.set_value(&name, value).map_err(|_| Error::Shape {
                    op: "transfer",
                    detail: format!(
                        "parameter `{name}`: checkpoint has {:?}, model expects {:?}",
                        source.value(id).shape(),
                        target.value(target.find(&name).expect("listed")).shape()
                    ),
                })?;
                report.transferred.push(name);
            }
            (true, None) => return Err(Error::Config(format!("checkpoint lacks backbone parameter `{name}`"))),
            (false, _) => report.fresh.push(name),
        }
    }
    Ok(report)
}
