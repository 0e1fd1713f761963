use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::PseudoLabels;
use crate::model::{ForwardOutput, ForwardVars};
use crate::tensor::{Axis, Tape, Var};

/// Huber-style loss: `x^2 / (2 delta)` inside `|x| < delta`, `|x| - delta / 2` outside.
pub fn smooth_l1(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        x * x / (2.0 * delta)
    } else {
        x.abs() - delta / 2.0
    }
}

/// How the confidence head's regression target is formed from the count error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceTarget {
    /// `exp(-|c_hat - c|)`, in `(0, 1]`.
    #[default]
    Decaying,
    /// `exp(+|c_hat - c|)`, which a sigmoid can never reach; kept for comparison runs.
    Literal,
}

pub fn confidence_target(c_hat: f64, c_bar: f64, mode: ConfidenceTarget) -> f64 {
    let err = (c_hat - c_bar).abs();
    match mode {
        ConfidenceTarget::Decaying => (-err).exp(),
        ConfidenceTarget::Literal => err.exp(),
    }
}

/// Weighted loss and its unweighted parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub count: f64,
    pub assign: f64,
    pub conf: f64,
}

fn check_labels(labels: &PseudoLabels, slots: usize, nodes: usize) -> Result<()> {
    if labels.floor_ids.len() != nodes {
        return Err(Error::shape(
            "loss",
            format!("{} floor ids for {nodes} nodes", labels.floor_ids.len()),
        ));
    }
    if labels.count > slots || labels.floor_ids.iter().any(|&s| s >= slots) {
        return Err(Error::invalid(format!(
            "pseudo count {} exceeds the {slots} floor slots; increase `slots`",
            labels.count
        )));
    }
    Ok(())
}

/// Loss terms recorded on the tape of a forward pass.
pub struct LossVars {
    pub total: Var,
    pub count: Var,
    pub assign: Var,
    pub conf: Var,
}

pub fn loss_on_tape(t: &mut Tape, out: &ForwardVars, labels: &PseudoLabels, cfg: &TrainConfig) -> Result<LossVars> {
    // the target is a constant: no gradient flows back into the count path
    let c_hat = t.value(out.c_hat).item().expect("1x1 count");
    let target = confidence_target(c_hat, labels.count as f64, cfg.confidence_target);
    loss_on_tape_with_target(t, out, labels, cfg, target)
}

/// [`loss_on_tape`] with the confidence target supplied by the caller.
/// Finite-difference checks use this to hold the target fixed, matching
/// the stopped gradient of the training loss.
pub fn loss_on_tape_with_target(
    t: &mut Tape,
    out: &ForwardVars,
    labels: &PseudoLabels,
    cfg: &TrainConfig,
    target: f64,
) -> Result<LossVars> {
    let (nodes, slots) = t.value(out.logits).dims();
    check_labels(labels, slots, nodes)?;
    let c_bar = labels.count as f64;

    let diff = t.add_scalar(out.c_hat, -c_bar);
    let count = t.smooth_l1(diff, cfg.delta);

    let lsm = t.log_softmax_rows(out.logits);
    let picked = t.pick(lsm, &labels.floor_ids)?;
    let mean = t.mean(picked, Axis::All);
    let assign = t.scale(mean, -1.0);

    let gap = t.add_scalar(out.u_hat, -target);
    let conf = t.mul(gap, gap)?;

    let parts = [(count, cfg.w_count), (assign, cfg.w_assign), (conf, cfg.w_conf)];
    let mut total = t.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let s = t.scale(v, w);
        total = t.add(total, s)?;
    }
    Ok(LossVars {
        total,
        count,
        assign,
        conf,
    })
}

impl LossVars {
    pub fn values(&self, t: &Tape) -> LossBreakdown {
        let v = |x: Var| t.value(x).item().expect("scalar loss");
        LossBreakdown {
            total: v(self.total),
            count: v(self.count),
            assign: v(self.assign),
            conf: v(self.conf),
        }
    }
}

/// Loss of an already computed forward output.
pub fn loss_total(output: &ForwardOutput, labels: &PseudoLabels, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let (nodes, slots) = output.assign_logits.dims();
    check_labels(labels, slots, nodes)?;
    let c_bar = labels.count as f64;
    let count = smooth_l1(output.c_hat - c_bar, cfg.delta);
    let assign = (0..nodes)
        .map(|i| {
            let row = output.assign_logits.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels.floor_ids[i]]
        })
        .sum::<f64>()
        / nodes as f64;
    let target = confidence_target(output.c_hat, c_bar, cfg.confidence_target);
    let conf = (output.u_hat - target).powi(2);
    Ok(LossBreakdown {
        total: cfg.w_count * count + cfg.w_assign * assign + cfg.w_conf * conf,
        count,
        assign,
        conf,
    })
}
