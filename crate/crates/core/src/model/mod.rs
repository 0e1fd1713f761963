//! The floor-counting network: node embeddings, edge-aware GATv2 blocks,
//! dense vertical-bias attention and three heads (count, confidence,
//! per-node floor slot).

mod checkpoint;
mod forward;
mod params;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    bind, forward, forward_on_tape, rebind, hard_assignment, predicted_count, Bound, Diagnostics, ForwardOutput, ForwardVars,
    Mode,
};
pub use params::{ModelParams, GLOBAL_MEAN, GLOBAL_STD};

/// Node feature width (`cx, cy, w, h, aspect, is_window`).
pub const NODE_DIM: usize = 6;
/// Edge feature width (`dx, dy, iou, overlap`).
pub const EDGE_DIM: usize = 4;
/// Global vector width (`tau, rho, sigma_y`).
pub const GLOBAL_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Number of GATv2 blocks.
    pub layers: usize,
    pub gat_heads: usize,
    pub vert_heads: usize,
    /// Floor slots; upper bound on the floor count.
    pub slots: usize,
    pub edge_dropout: f64,
    pub leaky_slope: f64,
    pub pos_hidden: usize,
    pub count_hidden: usize,
    pub bias_hidden: usize,
    /// One vertical bias per head instead of one shared by all heads.
    pub per_head_bias: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 3,
            gat_heads: 8,
            vert_heads: 8,
            slots: 15,
            edge_dropout: 0.1,
            leaky_slope: 0.2,
            pos_hidden: 64,
            count_hidden: 512,
            bias_hidden: 16,
            per_head_bias: false,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("gat_heads", self.gat_heads),
            ("vert_heads", self.vert_heads),
            ("slots", self.slots),
            ("pos_hidden", self.pos_hidden),
            ("count_hidden", self.count_hidden),
            ("bias_hidden", self.bias_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|p| p.1 == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        for (name, heads) in [("gat_heads", self.gat_heads), ("vert_heads", self.vert_heads)] {
            if !self.d_model.is_multiple_of(heads) {
                return Err(Error::invalid(format!(
                    "model config: d_model {} not divisible by {name} {heads}",
                    self.d_model
                )));
            }
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(Error::invalid(format!("model config: edge_dropout {} outside [0, 1)", self.edge_dropout)));
        }
        if !(self.leaky_slope.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::invalid("model config: leaky_slope must be finite and norm_eps positive"));
        }
        Ok(())
    }
}
