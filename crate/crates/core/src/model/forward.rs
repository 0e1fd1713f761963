use std::collections::BTreeMap;

use rand::Rng;

use super::{ModelConfig, ModelParams, EDGE_DIM, GLOBAL_DIM, GLOBAL_MEAN, GLOBAL_STD, NODE_DIM};
use crate::error::{Error, Result};
use crate::graph::FacadeGraph;
use crate::rng::substream;
use crate::tensor::{Array, Axis, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Edge dropout active, drawn from the given seed.
    Train { seed: u64 },
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    global_mean: [f64; GLOBAL_DIM],
    global_std: [f64; GLOBAL_DIM],
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    /// `(name, var)` pairs in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Puts every tensor of `params` on `tape`, as gradient leaves when
/// `trainable` and as constants otherwise.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<Bound> {
    let vars = params
        .tensors()
        .map(|(name, a)| {
            let v = if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            };
            (name.to_string(), v)
        })
        .collect();
    let triple = |name| -> Result<[f64; GLOBAL_DIM]> {
        let b = params.buffer(name)?;
        b.data()
            .try_into()
            .map_err(|_| Error::shape("bind", format!("buffer `{name}` has {} values", b.len())))
    };
    Ok(Bound {
        vars,
        global_mean: triple(GLOBAL_MEAN)?,
        global_std: triple(GLOBAL_STD)?,
    })
}

/// Pairs `vars` (one per tensor, in name order) with the names of `params`.
/// Used when a caller has already placed the tensors on a tape.
pub fn rebind(params: &ModelParams, vars: &[Var]) -> Result<Bound> {
    let names: Vec<&str> = params.tensors().map(|(n, _)| n).collect();
    if names.len() != vars.len() {
        return Err(Error::shape("rebind", format!("{} vars for {} tensors", vars.len(), names.len())));
    }
    let mut t = Tape::new();
    let mut b = bind(&mut t, params, false)?;
    b.vars = names.into_iter().map(String::from).zip(vars.iter().copied()).collect();
    Ok(b)
}

/// Handles to the interesting nodes of one forward pass.
pub struct ForwardVars {
    /// `1 x 1`.
    pub c_hat: Var,
    /// `1 x 1`.
    pub u_hat: Var,
    /// `N x S`.
    pub logits: Var,
    pub probs: Var,
    /// Receiving node of each directed edge (self-loops first).
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    /// Per GATv2 block, `E x H_gat` attention weights over directed edges.
    pub gat_attention: Vec<Var>,
    /// Per vertical head, the `N x N` attention matrix.
    pub vertical_attention: Vec<Var>,
    /// Per distinct bias, the `N x N` bias matrix (one entry unless biases are per head).
    pub vertical_bias: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    pub gat_attention: Vec<Array>,
    pub vertical_attention: Vec<Array>,
    pub vertical_bias: Vec<Array>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub c_hat: f64,
    pub u_hat: f64,
    pub assign_logits: Array,
    pub assign_probs: Array,
    pub diagnostics: Diagnostics,
}

impl ForwardOutput {
    pub fn count(&self) -> usize {
        predicted_count(self.c_hat)
    }

    pub fn assignment(&self) -> Vec<usize> {
        hard_assignment(&self.assign_probs)
    }
}

/// Integer floor count from the regression output: `max(1, round(c_hat))`.
pub fn predicted_count(c_hat: f64) -> usize {
    if c_hat.is_finite() && c_hat >= 1.5 {
        c_hat.round() as usize
    } else {
        1
    }
}

/// Row-wise argmax; ties go to the lower slot.
pub fn hard_assignment(scores: &Array) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row_slice(i);
            let mut best = 0;
            for (s, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

fn linear(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = t.matmul(x, p.var(&format!("{name}.w"))?)?;
    let b = format!("{name}.b");
    if p.has(&b) {
        t.add(y, p.var(&b)?)
    } else {
        Ok(y)
    }
}

fn norm(t: &mut Tape, p: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = p.var(&format!("{name}.gamma"))?;
    let beta = p.var(&format!("{name}.beta"))?;
    let alpha = p.var(&format!("{name}.alpha"))?;
    t.graph_norm(x, gamma, beta, alpha, eps)
}

/// `Proj(f) + PosMLP([cx, cy])`.
pub(crate) fn embed(t: &mut Tape, p: &Bound, graph: &FacadeGraph) -> Result<Var> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::invalid(format!(
            "facade `{}` has no detections; the model needs at least one node",
            graph.facade_id
        )));
    }
    let feats = t.constant(Array::from_fn(n, NODE_DIM, |i, j| graph.nodes[i].0[j]));
    let pos = t.constant(Array::from_fn(n, 2, |i, j| graph.nodes[i].0[j]));
    let proj = linear(t, p, "embed.in", feats)?;
    let hidden = linear(t, p, "embed.pos1", pos)?;
    let hidden = t.relu(hidden);
    let pos = linear(t, p, "embed.pos2", hidden)?;
    t.add(proj, pos)
}

/// Directed edge list with self-loops first, then both directions of each
/// kept undirected edge. Returns receivers, senders and edge features.
pub(crate) fn directed_edges(graph: &FacadeGraph, keep: &[bool]) -> (Vec<usize>, Vec<usize>, Array) {
    let n = graph.len();
    let mut recv: Vec<usize> = (0..n).collect();
    let mut send: Vec<usize> = (0..n).collect();
    let mut feats = vec![0.0; n * EDGE_DIM];
    for ((&(i, j), f), _) in graph.edges.iter().zip(&graph.edge_features).zip(keep).filter(|e| *e.1) {
        for (r, s) in [(i, j), (j, i)] {
            recv.push(r);
            send.push(s);
            feats.extend_from_slice(&f.0);
        }
    }
    let e = recv.len();
    (recv, send, Array::matrix(e, EDGE_DIM, feats))
}

pub(crate) struct EdgeList<'a> {
    pub recv: &'a [usize],
    pub send: &'a [usize],
    pub feats: Var,
}

/// One residual GATv2 block; returns the new node states and the attention.
pub(crate) fn gatv2_block(
    t: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    edges: &EdgeList,
) -> Result<(Var, Var)> {
    let n = t.value(h).rows();
    let name = |part: &str| format!("gat{layer}.{part}");
    let src = linear(t, p, &name("src"), h)?;
    let dst = linear(t, p, &name("dst"), h)?;
    let src_e = t.gather_rows(src, edges.recv)?;
    let dst_e = t.gather_rows(dst, edges.send)?;
    let edge_e = linear(t, p, &name("edge"), edges.feats)?;
    let pre = t.add(src_e, dst_e)?;
    let pre = t.add(pre, edge_e)?;
    let act = t.leaky_relu(pre, cfg.leaky_slope);
    let weighted = t.mul(act, p.var(&name("att"))?)?;
    let scores = t.head_sum(weighted, cfg.gat_heads)?;
    let attention = t.segment_softmax(scores, edges.recv, n)?;
    let messages = t.mul_heads(attention, dst_e)?;
    let agg = t.scatter_add_rows(messages, edges.recv, n)?;
    let mixed = linear(t, p, &name("mix"), agg)?;
    let res = t.add(h, mixed)?;
    Ok((norm(t, p, &name("norm"), res, cfg.norm_eps)?, attention))
}

/// Dense multi-head attention with a learned non-positive bias that depends
/// on the vertical distance between nodes.
pub(crate) fn vertical_attention(
    t: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    graph: &FacadeGraph,
    h: Var,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let n = graph.len();
    let heads = cfg.vert_heads;
    let dh = cfg.d_model / heads;
    let q = linear(t, p, "vert.q", h)?;
    let k = linear(t, p, "vert.k", h)?;
    let v = linear(t, p, "vert.v", h)?;

    let dy = t.constant(Array::from_fn(n * n, 1, |ij, _| graph.dy(ij / n, ij % n)));
    let hidden = linear(t, p, "vert.r1", dy)?;
    let hidden = t.relu(hidden);
    let r = linear(t, p, "vert.r2", hidden)?;
    let sp = t.softplus(r);
    let bias_flat = t.scale(sp, -1.0);
    let n_bias = t.value(bias_flat).cols();
    let biases = (0..n_bias)
        .map(|b| {
            let col = t.slice_cols(bias_flat, b, b + 1)?;
            t.reshape(col, n, n)
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let (a, b) = (hh * dh, (hh + 1) * dh);
        let qh = t.slice_cols(q, a, b)?;
        let kh = t.slice_cols(k, a, b)?;
        let vh = t.slice_cols(v, a, b)?;
        let kt = t.transpose(kh);
        let logits = t.matmul(qh, kt)?;
        let logits = t.scale(logits, scale);
        let logits = t.add(logits, biases[if n_bias == 1 { 0 } else { hh }])?;
        let att = t.softmax_rows(logits, None)?;
        outs.push(t.matmul(att, vh)?);
        maps.push(att);
    }
    let cat = t.concat(&outs, Axis::Cols)?;
    let proj = linear(t, p, "vert.o", cat)?;
    let res = t.add(h, proj)?;
    Ok((norm(t, p, "vert.norm", res, cfg.norm_eps)?, maps, biases))
}

/// `(c_hat, u_hat)` from mean-pooled node states and the standardized global vector.
pub(crate) fn counting_head(t: &mut Tape, p: &Bound, graph: &FacadeGraph, h: Var) -> Result<(Var, Var)> {
    let z = t.mean(h, Axis::Rows);
    let g: Vec<f64> = (0..GLOBAL_DIM)
        .map(|i| {
            let std = p.global_std[i];
            let std = if std > 0.0 { std } else { 1.0 };
            (graph.global[i] - p.global_mean[i]) / std
        })
        .collect();
    let g = t.constant(Array::row(g));
    let zg = t.concat(&[z, g], Axis::Cols)?;
    let hidden = linear(t, p, "count.fc1", zg)?;
    let hidden = t.relu(hidden);
    let raw = linear(t, p, "count.fc2", hidden)?;
    let c_hat = t.softplus(raw);
    let conf = linear(t, p, "conf", zg)?;
    Ok((c_hat, t.sigmoid(conf)))
}

/// Bilinear scores between floor queries and projected node keys.
pub(crate) fn assignment_head(t: &mut Tape, p: &Bound, cfg: &ModelConfig, h: Var) -> Result<(Var, Var)> {
    let keys = linear(t, p, "assign.key", h)?;
    let queries = p.var("assign.queries")?;
    let qt = t.transpose(queries);
    let logits = t.matmul(keys, qt)?;
    let logits = t.scale(logits, 1.0 / (cfg.d_model as f64).sqrt());
    let probs = t.softmax_rows(logits, None)?;
    Ok((logits, probs))
}

/// Records the full network on `tape`.
pub fn forward_on_tape(
    t: &mut Tape,
    p: &Bound,
    graph: &FacadeGraph,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardVars> {
    let mut h = embed(t, p, graph)?;
    let keep: Vec<bool> = match mode {
        Mode::Train { seed } if cfg.edge_dropout > 0.0 => {
            let mut rng = substream(seed, "edge-dropout");
            graph.edges.iter().map(|_| !rng.random_bool(cfg.edge_dropout)).collect()
        }
        _ => vec![true; graph.edges.len()],
    };
    let (recv, send, feats) = directed_edges(graph, &keep);
    let edges = EdgeList {
        recv: &recv,
        send: &send,
        feats: t.constant(feats),
    };
    let mut gat_attention = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let (next, att) = gatv2_block(t, p, cfg, layer, h, &edges)?;
        h = next;
        gat_attention.push(att);
    }
    let (h, vertical_attention, vertical_bias) = vertical_attention(t, p, cfg, graph, h)?;
    let (c_hat, u_hat) = counting_head(t, p, graph, h)?;
    let (logits, probs) = assignment_head(t, p, cfg, h)?;
    Ok(ForwardVars {
        c_hat,
        u_hat,
        logits,
        probs,
        receivers: recv,
        senders: send,
        gat_attention,
        vertical_attention,
        vertical_bias,
    })
}

/// Full forward pass without gradients.
pub fn forward(graph: &FacadeGraph, params: &ModelParams, cfg: &ModelConfig, mode: Mode) -> Result<ForwardOutput> {
    cfg.validate()?;
    params.check_against(cfg)?;
    let mut t = Tape::new();
    let p = bind(&mut t, params, false)?;
    let v = forward_on_tape(&mut t, &p, graph, cfg, mode)?;
    let values = |vars: &[Var]| vars.iter().map(|&x| t.value(x).clone()).collect();
    let scalar = |x: Var| t.value(x).item().expect("head output is 1x1");
    Ok(ForwardOutput {
        c_hat: scalar(v.c_hat),
        u_hat: scalar(v.u_hat),
        assign_logits: t.value(v.logits).clone(),
        assign_probs: t.value(v.probs).clone(),
        diagnostics: Diagnostics {
            gat_attention: values(&v.gat_attention),
            vertical_attention: values(&v.vertical_attention),
            vertical_bias: values(&v.vertical_bias),
            receivers: v.receivers,
            senders: v.senders,
        },
    })
}
