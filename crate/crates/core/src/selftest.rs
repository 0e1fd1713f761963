//! Built-in correctness checks: gradient checks, oracle comparisons and
//! fixed fixtures. Each returns a [`Check`] instead of panicking so callers
//! can report every result.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::eval::{baseline_agglomerative, baseline_kde, coverage_rate, floor_bands};
use crate::graph::{build_graph, compute_tau, components_bfs, pseudo_labels, GraphConfig};
use crate::labelfree::{
    candidates, gmm_fit, local_variance, local_variance_naive, select, synthetic_rectangles, GrayImage,
    ProposalConfig,
};
use crate::model::{forward, forward_on_tape, rebind, ModelConfig, ModelParams, Mode};
use crate::rng::substream;
use crate::synth::{delete_floor, generate, scatter, SynthConfig};
use crate::tensor::{finite_diff_check, Tape};
use crate::train::{confidence_target, loss_on_tape_with_target, prepare, smooth_l1, ConfidenceTarget, TrainConfig};
use crate::facade::FacadeRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Half regular, half irregular synthetic facades.
pub fn mixed_facades(n: usize, seed: u64) -> Result<Vec<FacadeRecord>> {
    let regular = generate(&SynthConfig { seed, ..Default::default() }, n / 2)?;
    let irregular = generate(
        &SynthConfig {
            seed: seed + 1,
            irregular: true,
            ..Default::default()
        },
        n - n / 2,
    )?;
    Ok(regular.into_iter().chain(irregular).collect())
}

/// Union-find floor counts against breadth-first search.
pub fn pseudo_count_oracle(facades: usize, seed: u64) -> Result<Check> {
    let start = Instant::now();
    let records = mixed_facades(facades, seed)?;
    let cfg = GraphConfig::default();
    let mut agree = 0;
    for r in &records {
        let g = build_graph(r, &cfg)?;
        agree += usize::from(pseudo_labels(&g).count == components_bfs(&g));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Check::new(
        "pseudo-count oracle",
        agree == records.len() && secs < 5.0,
        format!("{agree}/{} agree with BFS in {secs:.2}s", records.len()),
    ))
}

/// Threshold, edges and count of the three-detection example.
pub fn tau_hand_trace() -> Result<Check> {
    let ys = [0.2, 0.22, 0.6];
    let tau = compute_tau(&ys, 3, 0.5)?;
    let record = FacadeRecord {
        facade_id: "hand-trace".into(),
        width: 100,
        height: 100,
        boxes: ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                crate::facade::DetectionBox::new(
                    10.0 + 30.0 * i as f64,
                    y * 100.0 - 2.0,
                    4.0,
                    4.0,
                    crate::facade::Category::Window,
                )
            })
            .collect(),
        floor_count: None,
    };
    let g = build_graph(&record, &GraphConfig::default())?;
    let count = pseudo_labels(&g).count;
    let passed = (tau - 0.10).abs() < 1e-12 && (g.tau - 0.10).abs() < 1e-12 && g.edges == [(0, 1)] && count == 2;
    Ok(Check::new(
        "tau hand trace",
        passed,
        format!("tau {tau:.6}, edges {:?}, count {count}", g.edges),
    ))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        pos_hidden: 8,
        count_hidden: 16,
        bias_hidden: 4,
        ..Default::default()
    }
}

/// End-to-end loss gradients against central differences on random
/// 4-10 node graphs, with the confidence target held at its base value.
pub fn gradient_check(graphs: usize, seed: u64) -> Result<Check> {
    let start = Instant::now();
    let cfg = small_model();
    let tcfg = TrainConfig::default();
    let mut rng = substream(seed, "gradcheck");
    let mut errors = Vec::new();
    for i in 0..graphs {
        let n = rng.random_range(4..=10);
        let ex = prepare(&[scatter(n, seed.wrapping_add(i as u64))], &GraphConfig::default())?.remove(0);
        let params = ModelParams::init(&cfg, seed.wrapping_add(i as u64))?;
        let base = forward(&ex.graph, &params, &cfg, Mode::Eval)?;
        let target = confidence_target(base.c_hat, ex.labels.count as f64, tcfg.confidence_target);
        let arrays: Vec<_> = params.tensors().map(|(_, a)| a.clone()).collect();
        let check = finite_diff_check(
            |t: &mut Tape, v| {
                let p = rebind(&params, v)?;
                let out = forward_on_tape(t, &p, &ex.graph, &cfg, Mode::Eval)?;
                Ok(loss_on_tape_with_target(t, &out, &ex.labels, &tcfg, target)?.total)
            },
            &arrays,
            1e-5,
        )?;
        errors.extend(check.rel_errors);
    }
    errors.sort_by(f64::total_cmp);
    let below = errors.iter().filter(|&&e| e < 1e-3).count() as f64 / errors.len().max(1) as f64;
    let median = errors.get(errors.len() / 2).copied().unwrap_or(0.0);
    let secs = start.elapsed().as_secs_f64();
    Ok(Check::new(
        "loss gradients",
        below >= 0.99 && median < 1e-6 && secs < 120.0,
        format!(
            "{:.4} of {} coordinates below 1e-3, median {median:.2e}, {secs:.1}s",
            below,
            errors.len()
        ),
    ))
}

/// Every attention row and slot distribution sums to one; vertical biases are non-positive.
pub fn attention_validity(forwards: usize, seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut max_bias = f64::NEG_INFINITY;
    let mut rng = substream(seed, "attention");
    for i in 0..forwards {
        let cfg = ModelConfig {
            per_head_bias: i % 2 == 1,
            ..Default::default()
        };
        let s = seed.wrapping_add(i as u64);
        let params = ModelParams::init(&cfg, s)?;
        let g = build_graph(&scatter(rng.random_range(1..=12), s), &GraphConfig::default())?;
        let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train { seed: s } };
        let out = forward(&g, &params, &cfg, mode)?;
        let d = &out.diagnostics;
        for att in &d.gat_attention {
            for h in 0..att.cols() {
                let mut sums = vec![0.0; g.len()];
                for (e, &r) in d.receivers.iter().enumerate() {
                    sums[r] += att.at(e, h);
                }
                worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
            }
        }
        for a in d.vertical_attention.iter().chain([&out.assign_probs]) {
            for r in 0..a.rows() {
                worst = worst.max((a.row_slice(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        for b in &d.vertical_bias {
            max_bias = b.data().iter().fold(max_bias, |m, &v| m.max(v));
        }
    }
    Ok(Check::new(
        "attention validity",
        worst <= 1e-9 && max_bias <= 0.0,
        format!("max |row sum - 1| {worst:.2e}, max vertical bias {max_bias:.3e} over {forwards} forwards"),
    ))
}

/// Outputs under random node permutations.
pub fn permutation_equivariance(trials: usize, seed: u64) -> Result<Check> {
    let cfg = ModelConfig::default();
    let mut rng = substream(seed, "permutation");
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let s = seed.wrapping_add(i as u64);
        let params = ModelParams::init(&cfg, s)?;
        let g = build_graph(&scatter(rng.random_range(2..=12), s), &GraphConfig::default())?;
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut rng);
        let a = forward(&g, &params, &cfg, Mode::Eval)?;
        let b = forward(&g.permuted(&perm)?, &params, &cfg, Mode::Eval)?;
        worst = worst.max((a.c_hat - b.c_hat).abs()).max((a.u_hat - b.u_hat).abs());
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in a.assign_probs.row_slice(old).iter().zip(b.assign_probs.row_slice(new)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(Check::new(
        "permutation equivariance",
        worst <= 1e-6,
        format!("max deviation {worst:.2e} over {trials} permutations"),
    ))
}

/// Regular facades keep every floor; deleting one floor loses exactly one.
pub fn floor_integrity(facades: usize, seed: u64) -> Result<Check> {
    let records = generate(&SynthConfig { seed, ..Default::default() }, facades)?;
    let cfg = GraphConfig::default();
    let mut exact = 0;
    let (mut cases, mut one_less) = (0, 0);
    let mut rng = substream(seed, "delete-floor");
    for r in &records {
        let truth = r.floor_count.expect("synthetic truth") as usize;
        exact += usize::from(pseudo_labels(&build_graph(r, &cfg)?).count == truth);
        if truth >= 3 {
            let floor = rng.random_range(0..truth as u32);
            let damaged = delete_floor(r, floor);
            cases += 1;
            one_less += usize::from(pseudo_labels(&build_graph(&damaged, &cfg)?).count == truth - 1);
        }
    }
    Ok(Check::new(
        "floor integrity",
        exact == records.len() && one_less == cases,
        format!(
            "{exact}/{} exact on regular facades; {one_less}/{cases} one short after deleting a floor",
            records.len()
        ),
    ))
}

/// Single linkage at `tau` against the pseudo count, and KDE on zero-jitter facades.
pub fn baseline_cross_check(facades: usize, seed: u64) -> Result<Check> {
    let cfg = GraphConfig::default();
    let records = mixed_facades(facades, seed)?;
    let mut agree = 0;
    for r in &records {
        let g = build_graph(r, &cfg)?;
        agree += usize::from(baseline_agglomerative(r, g.tau)? == pseudo_labels(&g).count);
    }
    let clean = generate(
        &SynthConfig {
            seed,
            jitter: 0.0,
            ..Default::default()
        },
        facades,
    )?;
    let mut kde_hits = 0;
    for r in &clean {
        kde_hits += usize::from(baseline_kde(r, 0.02)? == r.floor_count.expect("synthetic truth") as usize);
    }
    let kde_rate = kde_hits as f64 / clean.len() as f64;
    Ok(Check::new(
        "baseline cross-check",
        agree == records.len() && kde_rate >= 0.95,
        format!(
            "agglomerative {agree}/{} equal to pseudo count; KDE exact on {kde_rate:.3} of zero-jitter facades",
            records.len()
        ),
    ))
}

/// Fixed values of the loss pieces.
pub fn loss_fixtures() -> Result<Check> {
    let mut ok = smooth_l1(0.5, 1.0) == 0.125 && smooth_l1(2.0, 1.0) == 1.5;
    let (below, above) = (smooth_l1(1.0 - 1e-12, 1.0), smooth_l1(1.0 + 1e-12, 1.0));
    ok &= (below - 0.5).abs() < 1e-9 && (above - 0.5).abs() < 1e-9 && smooth_l1(-0.5, 1.0) == 0.125;

    let logits = crate::tensor::Array::zeros(3, 15);
    let mut t = Tape::new();
    let l = t.constant(logits);
    let lsm = t.log_softmax_rows(l);
    let picked = t.pick(lsm, &[0, 7, 14])?;
    let ce = -t.value(picked).data().iter().sum::<f64>() / 3.0;
    ok &= (ce - 15f64.ln()).abs() < 1e-12;

    let mut target_ok = true;
    for i in 0..=400 {
        let c_hat = i as f64 * 0.05;
        for c_bar in 1..=15 {
            let t = confidence_target(c_hat, c_bar as f64, ConfidenceTarget::Decaying);
            target_ok &= t > 0.0 && t <= 1.0;
        }
    }
    ok &= target_ok;
    Ok(Check::new(
        "loss fixtures",
        ok,
        format!("SmoothL1(0.5) {}, SmoothL1(2) {}, uniform CE {ce:.6}, targets in (0, 1]: {target_ok}",
            smooth_l1(0.5, 1.0),
            smooth_l1(2.0, 1.0)
        ),
    ))
}

/// Mixture monotonicity, variance map oracle and proposal recovery.
pub fn labelfree_checks(fits: usize, seed: u64) -> Result<Check> {
    let mut rng = substream(seed, "labelfree");
    let mut monotone = 0;
    for i in 0..fits {
        let dim = rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let samples: Vec<Vec<f64>> = (0..rng.random_range(40..200))
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let m = gmm_fit(&samples, n, 100, 1e-6, seed.wrapping_add(i as u64))?;
        monotone += usize::from(m.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    let mut variance_exact = true;
    for _ in 0..10 {
        let img = GrayImage::new(32, 32, (0..32 * 32).map(|_| rng.random()).collect())?;
        variance_exact &= local_variance(&img, 15)? == local_variance_naive(&img, 15)?;
    }

    let (img, truth) = synthetic_rectangles();
    let cfg = ProposalConfig {
        seed,
        ..Default::default()
    };
    let cands = candidates(&img, None, &cfg)?;
    let scores: BTreeMap<usize, f64> = (0..cands.boxes.len()).map(|i| (i, 0.9)).collect();
    let props = select(&cands.boxes, &scores, &cfg)?.boxes();
    let truth_record = FacadeRecord {
        facade_id: "rectangles".into(),
        width: img.width as u32,
        height: img.height as u32,
        boxes: truth.clone(),
        floor_count: None,
    };
    let coverage = coverage_rate(&props, &floor_bands(&truth_record))?;
    let min_iou = truth
        .iter()
        .map(|t| props.iter().map(|p| p.iou(t)).fold(0.0, f64::max))
        .fold(1.0, f64::min);

    Ok(Check::new(
        "label-free pipeline",
        monotone == fits && variance_exact && coverage == 1.0 && min_iou >= 0.5,
        format!(
            "{monotone}/{fits} monotone fits, variance oracle exact: {variance_exact}, coverage {coverage:.2}, min IoU {min_iou:.3}"
        ),
    ))
}

/// All fast checks at their full sizes.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        pseudo_count_oracle(200, seed)?,
        tau_hand_trace()?,
        gradient_check(20, seed)?,
        attention_validity(100, seed)?,
        permutation_equivariance(50, seed)?,
        floor_integrity(500, seed)?,
        baseline_cross_check(200, seed)?,
        loss_fixtures()?,
        labelfree_checks(50, seed)?,
    ])
}
