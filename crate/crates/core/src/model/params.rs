use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, EDGE_DIM, GLOBAL_DIM, NODE_DIM};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};
use crate::tensor::Array;

/// Buffer holding the training-set mean of the global vector.
pub const GLOBAL_MEAN: &str = "global.mean";
/// Buffer holding the training-set standard deviation of the global vector.
pub const GLOBAL_STD: &str = "global.std";

enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
    /// Standard normal times a factor.
    Normal(f64),
}

/// Trainable tensors plus non-trainable buffers, both keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Array>,
    buffers: BTreeMap<String, Array>,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
        out.push((format!("{name}.w"), (fan_in, fan_out), Init::Uniform(fan_in)));
        if bias {
            out.push((format!("{name}.b"), (1, fan_out), Init::Zeros));
        }
    };
    let norm = |out: &mut Vec<_>, name: &str| {
        out.push((format!("{name}.gamma"), (1, d), Init::Ones));
        out.push((format!("{name}.beta"), (1, d), Init::Zeros));
        out.push((format!("{name}.alpha"), (1, d), Init::Ones));
    };

    linear(&mut out, "embed.in", NODE_DIM, d, true);
    linear(&mut out, "embed.pos1", 2, cfg.pos_hidden, true);
    linear(&mut out, "embed.pos2", cfg.pos_hidden, d, true);
    for l in 0..cfg.layers {
        let p = format!("gat{l}");
        linear(&mut out, &format!("{p}.src"), d, d, true);
        linear(&mut out, &format!("{p}.dst"), d, d, true);
        linear(&mut out, &format!("{p}.edge"), EDGE_DIM, d, false);
        // one scoring vector per head, heads laid out side by side
        out.push((format!("{p}.att"), (1, d), Init::Uniform(d / cfg.gat_heads)));
        linear(&mut out, &format!("{p}.mix"), d, d, true);
        norm(&mut out, &format!("{p}.norm"));
    }
    for proj in ["q", "k", "v", "o"] {
        linear(&mut out, &format!("vert.{proj}"), d, d, true);
    }
    let bias_out = if cfg.per_head_bias { cfg.vert_heads } else { 1 };
    linear(&mut out, "vert.r1", 1, cfg.bias_hidden, true);
    linear(&mut out, "vert.r2", cfg.bias_hidden, bias_out, true);
    norm(&mut out, "vert.norm");
    linear(&mut out, "count.fc1", d + GLOBAL_DIM, cfg.count_hidden, true);
    linear(&mut out, "count.fc2", cfg.count_hidden, 1, true);
    linear(&mut out, "conf", d + GLOBAL_DIM, 1, true);
    out.push(("assign.queries".into(), (cfg.slots, d), Init::Normal(1.0)));
    linear(&mut out, "assign.key", d, d, true);
    out
}

fn draw(init: &Init, shape: (usize, usize), rng: &mut StreamRng) -> Array {
    match *init {
        Init::Uniform(fan_in) => {
            let bound = (1.0 / fan_in as f64).sqrt();
            Array::from_fn(shape.0, shape.1, |_, _| rng.random_range(-bound..=bound))
        }
        Init::Zeros => Array::zeros(shape.0, shape.1),
        Init::Ones => Array::full(shape.0, shape.1, 1.0),
        Init::Normal(scale) => Array::from_fn(shape.0, shape.1, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
    }
}

impl ModelParams {
    /// Fresh parameters for `cfg`, drawn from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let a = draw(&init, shape, &mut rng);
                (name, a)
            })
            .collect();
        let buffers = BTreeMap::from([
            (GLOBAL_MEAN.to_string(), Array::zeros(1, GLOBAL_DIM)),
            (GLOBAL_STD.to_string(), Array::full(1, GLOBAL_DIM, 1.0)),
        ]);
        Ok(Self { tensors, buffers })
    }

    /// Expected `(name, shape)` of every trainable tensor under `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub(crate) fn from_parts(tensors: BTreeMap<String, Array>, buffers: BTreeMap<String, Array>) -> Self {
        Self { tensors, buffers }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Array> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no buffer named `{name}`")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no buffer named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_buffer", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Trainable tensors in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().chain(self.buffers.values()).all(Array::is_finite)
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::shape(
                "params",
                format!("{} tensors, config expects {}", self.tensors.len(), expected.len()),
            ));
        }
        for (name, (r, c)) in expected {
            let a = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::shape("params", format!("missing tensor `{name}`")))?;
            if a.dims() != (r, c) || a.shape().len() != 2 {
                return Err(Error::shape(
                    "params",
                    format!("`{name}` is {:?}, config expects [{r}, {c}]", a.shape()),
                ));
            }
        }
        for name in [GLOBAL_MEAN, GLOBAL_STD] {
            let b = self.buffer(name)?;
            if b.dims() != (1, GLOBAL_DIM) {
                return Err(Error::shape("params", format!("buffer `{name}` is {:?}", b.shape())));
            }
        }
        Ok(())
    }
}
