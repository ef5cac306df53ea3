use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{masked_count, MaskRatios};
use crate::nn::BlockDims;
use crate::scene::Horizon;

/// Architecture hyper-parameters shared by pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width `D`.
    pub width: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub encoder_depth: usize,
    pub regressor_depth: usize,
    pub spatial_depth: usize,
    pub motion_depth: usize,
    /// Number of predicted worlds `K`.
    pub modes: usize,
    pub generator_hidden: usize,
    pub horizon: Horizon,
    /// Waypoints per lane `W`; every lane must have exactly this many.
    pub lane_points: usize,
    /// Positional table capacity.
    pub max_agents: usize,
    pub max_lanes: usize,
    pub ratios: MaskRatios,
    /// Meters per unit of network input/output for coordinates.
    pub coord_scale: f64,
    /// m/s per unit of network output for speeds.
    pub speed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            encoder_depth: 4,
            regressor_depth: 2,
            spatial_depth: 4,
            motion_depth: 2,
            modes: 6,
            generator_hidden: 128,
            horizon: Horizon::DEFAULT,
            lane_points: 20,
            max_agents: 8,
            max_lanes: 16,
            ratios: MaskRatios::default(),
            coord_scale: 10.0,
            speed_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.ffn_mult == 0 || self.generator_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder_depth == 0 {
            return bad("encoder depth must be positive".into());
        }
        if self.modes == 0 {
            return bad("at least one mode is required".into());
        }
        if self.horizon.history == 0 || self.horizon.future == 0 {
            return bad("horizons must be positive".into());
        }
        if self.lane_points < 2 {
            return bad("lanes need at least two points".into());
        }
        if self.max_agents == 0 || self.max_lanes == 0 {
            return bad("positional capacity must be positive".into());
        }
        if !(self.coord_scale > 0.0 && self.speed_scale > 0.0) {
            return bad("output scales must be positive".into());
        }
        self.ratios.validate()
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims { width: self.width, heads: self.heads, hidden: self.width * self.ffn_mult, dropout: self.dropout }
    }

    /// Positional/query table rows: history slots, future slots, lane slots.
    pub fn slot_count(&self) -> usize {
        2 * self.max_agents + self.max_lanes
    }

    pub fn masked_history(&self) -> usize {
        masked_count(self.ratios.history, self.horizon.history)
    }

    pub fn masked_future(&self) -> usize {
        masked_count(self.ratios.future, self.horizon.future)
    }

    pub fn masked_lane_points(&self) -> usize {
        masked_count(self.ratios.lanes, self.lane_points)
    }
}
