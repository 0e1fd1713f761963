//! Losses, AdamW and the mini-batch training loop.

mod loss;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facade::FacadeRecord;
use crate::graph::{build_graph, pseudo_labels, FacadeGraph, GraphConfig, PseudoLabels};
use crate::model::{bind, forward_on_tape, predicted_count, ModelConfig, ModelParams, Mode, GLOBAL_MEAN, GLOBAL_STD};
use crate::rng::substream;
use crate::tensor::{scalar, Array, Tape};

pub use loss::{confidence_target, loss_on_tape, loss_on_tape_with_target, loss_total, smooth_l1, ConfidenceTarget, LossBreakdown, LossVars};
pub use optim::{clip_gradients, global_norm, optimizer_step, GradMap, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub w_count: f64,
    pub w_assign: f64,
    pub w_conf: f64,
    /// SmoothL1 transition point.
    pub delta: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub confidence_target: ConfidenceTarget,
    /// Standardize the global vector with training-set statistics.
    pub standardize_global: bool,
    /// Start the count output at the mean training count.
    pub init_count_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 1e-4,
            batch_size: 4,
            grad_clip: 2.0,
            epochs: 200,
            w_count: 0.4,
            w_assign: 0.4,
            w_conf: 0.2,
            delta: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            confidence_target: ConfidenceTarget::Decaying,
            standardize_global: true,
            init_count_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("grad_clip", self.grad_clip),
            ("delta", self.delta),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(Error::invalid(format!("train config: {name} must be positive, got {v}")));
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("w_count", self.w_count),
            ("w_assign", self.w_assign),
            ("w_conf", self.w_conf),
        ];
        if let Some((name, v)) = non_negative.iter().find(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return Err(Error::invalid(format!("train config: {name} must be non-negative, got {v}")));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config: batch_size must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("train config: {name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// A graph with its weak labels.
#[derive(Clone, Debug)]
pub struct Example {
    pub graph: FacadeGraph,
    pub labels: PseudoLabels,
}

/// Builds graphs and pseudo-labels for `records`.
pub fn prepare(records: &[FacadeRecord], cfg: &GraphConfig) -> Result<Vec<Example>> {
    records
        .par_iter()
        .map(|r| {
            let graph = build_graph(r, cfg)?;
            let labels = pseudo_labels(&graph);
            Ok(Example { graph, labels })
        })
        .collect()
}

fn fnv(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Deterministic split by facade-id hash; roughly `val_fraction` of the
/// records land in the second half.
pub fn split_by_hash<T: Clone>(items: &[T], id: impl Fn(&T) -> &str, val_fraction: f64) -> (Vec<T>, Vec<T>) {
    let cut = (val_fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
    items
        .iter()
        .cloned()
        .partition(|it| fnv(id(it).bytes()) % 10_000 >= cut)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_mae: f64,
    pub train_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,L_total,L_count,L_assign,L_conf,train_mae,train_acc";

pub fn write_epoch_log(mut w: impl Write, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(w, "{EPOCH_LOG_HEADER}")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.epoch, e.loss.total, e.loss.count, e.loss.assign, e.loss.conf, e.train_mae, e.train_acc
        )?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Loss, gradients and raw count of one example.
pub fn example_gradients(
    params: &ModelParams,
    ex: &Example,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(LossBreakdown, GradMap, f64)> {
    let mut t = Tape::new();
    let bound = bind(&mut t, params, true)?;
    let out = forward_on_tape(&mut t, &bound, &ex.graph, model_cfg, mode)?;
    let loss = loss_on_tape(&mut t, &out, &ex.labels, cfg)?;
    let mut grads = t.backward(loss.total)?;
    let c_hat = t.value(out.c_hat).item().expect("1x1 count");
    let map = bound
        .vars()
        .map(|(name, v)| (name.to_string(), grads.take(v).expect("leaf gradient")))
        .collect();
    Ok((loss.values(&t), map, c_hat))
}

/// Sets the global-vector buffers and the count output bias from the training set.
pub fn data_dependent_init(params: &mut ModelParams, examples: &[Example], cfg: &TrainConfig) -> Result<()> {
    let n = examples.len() as f64;
    if cfg.standardize_global {
        let mut mean = [0.0; 3];
        for ex in examples {
            for (m, g) in mean.iter_mut().zip(ex.graph.global) {
                *m += g / n;
            }
        }
        let mut std = [0.0; 3];
        for ex in examples {
            for k in 0..3 {
                std[k] += (ex.graph.global[k] - mean[k]).powi(2) / n;
            }
        }
        let std = std.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        params.set_buffer(GLOBAL_MEAN, Array::row(mean.to_vec()))?;
        params.set_buffer(GLOBAL_STD, Array::row(std.to_vec()))?;
    }
    if cfg.init_count_bias {
        let mean_count = examples.iter().map(|e| e.labels.count as f64).sum::<f64>() / n;
        params.get_mut("count.fc2.b")?.data_mut()[0] = scalar::softplus_inverse(mean_count.max(1e-3));
    }
    Ok(())
}

fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    fnv(seed
        .to_le_bytes()
        .into_iter()
        .chain((epoch as u64).to_le_bytes())
        .chain((index as u64).to_le_bytes()))
}

/// Trains from a fresh initialization; `on_epoch` sees every epoch's log
/// and the current parameters.
pub fn train(
    examples: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for ex in examples {
        if ex.graph.is_empty() {
            return Err(Error::invalid(format!("facade `{}` has no detections", ex.graph.facade_id)));
        }
        if ex.labels.count > model_cfg.slots {
            return Err(Error::invalid(format!(
                "facade `{}` has {} pseudo floors but only {} slots; increase `slots`",
                ex.graph.facade_id, ex.labels.count, model_cfg.slots
            )));
        }
    }

    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    data_dependent_init(&mut params, examples, cfg)?;
    let mut state = OptimizerState::default();
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        let (mut abs_err, mut exact) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mode = Mode::Train {
                        seed: dropout_seed(cfg.seed, epoch, i),
                    };
                    example_gradients(&params, &examples[i], model_cfg, cfg, mode)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: GradMap = GradMap::new();
            for ((loss, g, c_hat), &i) in results.into_iter().zip(batch) {
                sum.total += loss.total;
                sum.count += loss.count;
                sum.assign += loss.assign;
                sum.conf += loss.conf;
                let err = predicted_count(c_hat).abs_diff(examples[i].labels.count);
                abs_err += err as f64;
                exact += usize::from(err == 0);
                for (name, mut ga) in g {
                    ga.scale_in_place(scale);
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&ga),
                        None => {
                            grads.insert(name, ga);
                        }
                    }
                }
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            optimizer_step(&mut params, &grads, &mut state, cfg)?;
        }
        let n = examples.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                total: sum.total / n,
                count: sum.count / n,
                assign: sum.assign / n,
                conf: sum.conf / n,
            },
            train_mae: abs_err / n,
            train_acc: exact as f64 / n,
        };
        on_epoch(&entry, &params);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}
