use super::forward::{assignment_head, counting_head, directed_edges, embed, gatv2_block, vertical_attention, EdgeList};
use super::*;
use crate::graph::{build_graph, FacadeGraph, GraphConfig};
use crate::synth::scatter;
use crate::tensor::{finite_diff_check, Array, Axis, Tape, Var};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        pos_hidden: 8,
        count_hidden: 16,
        bias_hidden: 4,
        ..Default::default()
    }
}

fn graph(n: usize, seed: u64) -> FacadeGraph {
    build_graph(&scatter(n, seed), &GraphConfig::default()).unwrap()
}

fn weighted(t: &mut Tape, x: Var, salt: usize) -> Var {
    let (r, c) = t.value(x).dims();
    let w = t.constant(Array::from_fn(r, c, |i, j| ((i * 31 + j * 17 + salt) % 13 + 1) as f64 / 7.0));
    let p = t.mul(x, w).unwrap();
    t.sum(p, Axis::All)
}

fn assert_rows_sum_to_one(a: &Array) {
    for i in 0..a.rows() {
        let s: f64 = a.row_slice(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
    }
}

#[test]
fn config_divisibility_is_checked() {
    let bad = ModelConfig {
        d_model: 60,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    assert!(ModelParams::init(&bad, 0).is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn init_is_seeded_and_bounded() {
    let cfg = ModelConfig::default();
    let a = ModelParams::init(&cfg, 1).unwrap();
    assert_eq!(a, ModelParams::init(&cfg, 1).unwrap());
    assert_ne!(a, ModelParams::init(&cfg, 2).unwrap());
    let w = a.get("gat0.src.w").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= (1.0f64 / 64.0).sqrt()));
    assert!(a.get("gat0.src.b").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get("vert.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    let q = a.get("assign.queries").unwrap();
    assert_eq!(q.dims(), (15, 64));
    assert!(q.data().iter().all(|v| v.abs() < 6.0));
    a.check_against(&cfg).unwrap();
}

#[test]
fn embed_with_zero_weights_is_bias_only() {
    let cfg = small();
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    for name in ["embed.in.w", "embed.pos1.w", "embed.pos2.w"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    params.get_mut("embed.in.b").unwrap().data_mut().fill(0.25);
    params.get_mut("embed.pos2.b").unwrap().data_mut().fill(0.5);
    let g = graph(5, 3);
    let mut t = Tape::new();
    let p = bind(&mut t, &params, false).unwrap();
    let h = embed(&mut t, &p, &g).unwrap();
    assert_eq!(t.value(h).dims(), (5, 16));
    assert!(t.value(h).data().iter().all(|&v| v == 0.75));
}

#[test]
fn embed_gradient_matches_finite_differences() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let g = graph(5, 4);
    let targets = ["embed.in.w", "embed.pos1.w", "embed.pos2.w"];
    let arrays: Vec<Array> = targets.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let check = finite_diff_check(
        |t, v| {
            let mut all = Vec::new();
            for (name, a) in params.tensors() {
                all.push(match targets.iter().position(|n| *n == name) {
                    Some(k) => v[k],
                    None => t.constant(a.clone()),
                });
            }
            let p = rebind(&params, &all)?;
            let h = embed(t, &p, &g)?;
            Ok(t.sum(h, Axis::All))
        },
        &arrays,
        1e-6,
    )
    .unwrap();
    assert!(check.max_rel_error() < 1e-6, "{}", check.max_rel_error());
}

#[test]
fn empty_graph_is_rejected() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let g = graph(0, 0);
    assert!(forward(&g, &params, &cfg, Mode::Eval).is_err());
}

#[test]
fn single_node_attends_to_itself() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let out = forward(&graph(1, 9), &params, &cfg, Mode::Eval).unwrap();
    for att in &out.diagnostics.gat_attention {
        assert_eq!(att.rows(), 1);
        assert!(att.data().iter().all(|&a| a == 1.0));
    }
    assert_eq!(out.assign_probs.rows(), 1);
}

fn check_attention(out: &ForwardOutput, n: usize, heads: usize) {
    let d = &out.diagnostics;
    for att in &d.gat_attention {
        for h in 0..heads {
            let mut sums = vec![0.0; n];
            for (e, &r) in d.receivers.iter().enumerate() {
                sums[r] += att.at(e, h);
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
    for v in &d.vertical_attention {
        assert_rows_sum_to_one(v);
    }
    for b in &d.vertical_bias {
        assert!(b.data().iter().all(|&x| x <= 0.0));
    }
    assert_rows_sum_to_one(&out.assign_probs);
    assert!(out.u_hat > 0.0 && out.u_hat < 1.0);
    assert!(out.c_hat >= 0.0);
}

#[test]
fn attention_distributions_are_valid() {
    let cfg = ModelConfig::default();
    for seed in 0..5 {
        let params = ModelParams::init(&cfg, seed).unwrap();
        let g = graph(4 + seed as usize, seed);
        let out = forward(&g, &params, &cfg, Mode::Train { seed }).unwrap();
        check_attention(&out, g.len(), cfg.gat_heads);
    }
}

#[test]
fn per_head_bias_variant_runs() {
    let cfg = ModelConfig {
        per_head_bias: true,
        ..small()
    };
    let params = ModelParams::init(&cfg, 0).unwrap();
    let out = forward(&graph(6, 1), &params, &cfg, Mode::Eval).unwrap();
    assert_eq!(out.diagnostics.vertical_bias.len(), cfg.vert_heads);
    check_attention(&out, 6, cfg.gat_heads);
}

#[test]
fn equal_heights_give_symmetric_bias() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let mut rec = scatter(3, 5);
    let y = rec.boxes[0].y + rec.boxes[0].h / 2.0;
    rec.boxes[1].y = y - rec.boxes[1].h / 2.0;
    let g = build_graph(&rec, &GraphConfig::default()).unwrap();
    let out = forward(&g, &params, &cfg, Mode::Eval).unwrap();
    let b = &out.diagnostics.vertical_bias[0];
    assert_eq!(b.at(0, 1), b.at(1, 0));
    assert_eq!(b.at(0, 1), b.at(0, 0));
}

#[test]
fn gat_block_gradient_matches_finite_differences() {
    let cfg = small();
    let mut params = ModelParams::init(&cfg, 6).unwrap();
    // at alpha = 1 the mix bias cancels exactly and its gradient is pure roundoff
    params.get_mut("gat0.norm.alpha").unwrap().data_mut().fill(0.7);
    let g = graph(6, 6);
    let (recv, send, feats) = directed_edges(&g, &vec![true; g.edges.len()]);
    assert!(recv.len() > 6, "fixture should have edges");
    let h0 = Array::from_fn(6, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    let names: Vec<String> = params.tensors().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("gat0.")).collect();
    let mut arrays: Vec<Array> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    arrays.push(h0);
    let check = finite_diff_check(
        |t, v| {
            let all: Vec<Var> = params
                .tensors()
                .map(|(name, a)| match names.iter().position(|n| n == name) {
                    Some(k) => v[k],
                    None => t.constant(a.clone()),
                })
                .collect();
            let p = rebind(&params, &all)?;
            let edges = EdgeList {
                recv: &recv,
                send: &send,
                feats: t.constant(feats.clone()),
            };
            let (h, _) = gatv2_block(t, &p, &cfg, 0, v[names.len()], &edges)?;
            Ok(weighted(t, h, 1))
        },
        &arrays,
        1e-5,
    )
    .unwrap();
    assert!(check.fraction_below(1e-3) == 1.0, "max {}", check.max_rel_error());
}

#[test]
fn vertical_rows_sum_to_one_for_any_bias_scale() {
    let cfg = small();
    let g = graph(7, 8);
    for scale in [0.0, 1.0, 50.0, 1e4] {
        let mut params = ModelParams::init(&cfg, 8).unwrap();
        params.get_mut("vert.r2.b").unwrap().data_mut().fill(scale);
        let mut t = Tape::new();
        let p = bind(&mut t, &params, false).unwrap();
        let h = t.constant(Array::from_fn(7, 16, |i, j| (i as f64 - j as f64) * 0.1));
        let (_, maps, biases) = vertical_attention(&mut t, &p, &cfg, &g, h).unwrap();
        for m in maps {
            assert_rows_sum_to_one(t.value(m));
        }
        assert!(t.value(biases[0]).data().iter().all(|&b| b <= 0.0));
    }
}

#[test]
fn counting_head_is_pool_invariant() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let g = graph(4, 3);
    let h = Array::from_fn(4, 16, |i, j| ((i * 5 + j) % 7) as f64 * 0.3 - 1.0);
    let run = |h: Array| {
        let mut t = Tape::new();
        let p = bind(&mut t, &params, false).unwrap();
        let h = t.constant(h);
        let (c, u) = counting_head(&mut t, &p, &g, h).unwrap();
        (t.value(c).item().unwrap(), t.value(u).item().unwrap())
    };
    let base = run(h.clone());
    let reversed = Array::from_fn(4, 16, |i, j| h.at(3 - i, j));
    let doubled = Array::from_fn(8, 16, |i, j| h.at(i % 4, j));
    let (rc, ru) = run(reversed);
    assert!((rc - base.0).abs() < 1e-9 && (ru - base.1).abs() < 1e-9);
    let (dc, du) = run(doubled);
    assert!((dc - base.0).abs() < 1e-12 && (du - base.1).abs() < 1e-12);
    assert!(base.1 > 0.0 && base.1 < 1.0);
}

#[test]
fn zero_keys_give_uniform_slots() {
    let cfg = small();
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    params.get_mut("assign.key.w").unwrap().data_mut().fill(0.0);
    let mut t = Tape::new();
    let p = bind(&mut t, &params, false).unwrap();
    let h = t.constant(Array::full(3, 16, 0.7));
    let (_, probs) = assignment_head(&mut t, &p, &cfg, h).unwrap();
    for &v in t.value(probs).data() {
        assert!((v - 1.0 / 15.0).abs() < 1e-15);
    }
}

#[test]
fn assignment_ce_gradient_matches_finite_differences() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let h = Array::from_fn(4, 16, |i, j| ((i * 3 + j * 5) % 9) as f64 / 9.0 - 0.4);
    let labels = [0, 2, 1, 2];
    let targets = ["assign.key.w", "assign.key.b", "assign.queries"];
    let mut arrays: Vec<Array> = targets.iter().map(|n| params.get(n).unwrap().clone()).collect();
    arrays.push(h);
    let check = finite_diff_check(
        |t, v| {
            let all: Vec<Var> = params
                .tensors()
                .map(|(name, a)| match targets.iter().position(|n| *n == name) {
                    Some(k) => v[k],
                    None => t.constant(a.clone()),
                })
                .collect();
            let p = rebind(&params, &all)?;
            let (logits, _) = assignment_head(t, &p, &cfg, v[3])?;
            let lsm = t.log_softmax_rows(logits);
            let picked = t.pick(lsm, &labels)?;
            let m = t.mean(picked, Axis::All);
            Ok(t.scale(m, -1.0))
        },
        &arrays,
        1e-4,
    )
    .unwrap();
    assert!(check.max_rel_error() < 1e-6, "{}", check.max_rel_error());
}

#[test]
fn ties_go_to_lower_slot() {
    let a = Array::matrix(2, 3, vec![0.2, 0.4, 0.4, 0.5, 0.1, 0.5]);
    assert_eq!(hard_assignment(&a), vec![1, 0]);
    assert_eq!(predicted_count(0.2), 1);
    assert_eq!(predicted_count(1.49), 1);
    assert_eq!(predicted_count(1.5), 2);
    assert_eq!(predicted_count(4.4), 4);
}

#[test]
fn eval_is_deterministic_and_train_without_dropout_matches() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 11).unwrap();
    let g = graph(9, 11);
    let a = forward(&g, &params, &cfg, Mode::Eval).unwrap();
    let b = forward(&g, &params, &cfg, Mode::Eval).unwrap();
    assert_eq!(a.c_hat.to_bits(), b.c_hat.to_bits());
    assert_eq!(a.assign_logits, b.assign_logits);
    let no_drop = ModelConfig {
        edge_dropout: 0.0,
        ..cfg.clone()
    };
    let c = forward(&g, &params, &no_drop, Mode::Train { seed: 3 }).unwrap();
    assert_eq!(a.c_hat.to_bits(), c.c_hat.to_bits());
    assert_eq!(a.assign_probs, c.assign_probs);
}

#[test]
fn train_mode_drops_both_directions() {
    let cfg = ModelConfig {
        edge_dropout: 0.5,
        ..small()
    };
    let params = ModelParams::init(&cfg, 0).unwrap();
    let g = graph(10, 2);
    let out = forward(&g, &params, &cfg, Mode::Train { seed: 1 }).unwrap();
    let d = &out.diagnostics;
    let pairs: Vec<(usize, usize)> = d.receivers.iter().copied().zip(d.senders.iter().copied()).collect();
    assert!(pairs.len() < 10 + 2 * g.edges.len());
    for &(r, s) in &pairs {
        assert!(pairs.contains(&(s, r)));
    }
}

#[test]
fn permuting_nodes_permutes_outputs() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 21).unwrap();
    let g = graph(8, 21);
    let perm = [3, 0, 7, 1, 6, 2, 5, 4];
    let pg = g.permuted(&perm).unwrap();
    let a = forward(&g, &params, &cfg, Mode::Eval).unwrap();
    let b = forward(&pg, &params, &cfg, Mode::Eval).unwrap();
    assert!((a.c_hat - b.c_hat).abs() < 1e-6);
    assert!((a.u_hat - b.u_hat).abs() < 1e-6);
    for (new, &old) in perm.iter().enumerate() {
        for s in 0..cfg.slots {
            assert!((a.assign_probs.at(old, s) - b.assign_probs.at(new, s)).abs() < 1e-6);
        }
    }
}

#[test]
fn full_forward_gradient_matches_finite_differences() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 13).unwrap();
    let g = graph(6, 13);
    let arrays: Vec<Array> = params.tensors().map(|(_, a)| a.clone()).collect();
    let check = finite_diff_check(
        |t, v| {
            let p = rebind(&params, v)?;
            let out = forward_on_tape(t, &p, &g, &cfg, Mode::Eval)?;
            let probs = weighted(t, out.probs, 2);
            let s = t.add(out.c_hat, out.u_hat)?;
            t.add(s, probs)
        },
        &arrays,
        1e-5,
    )
    .unwrap();
    assert!(check.fraction_below(1e-3) >= 0.99, "max {}", check.max_rel_error());
    assert!(check.median() < 1e-6, "median {}", check.median());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let mut params = ModelParams::init(&cfg, 17).unwrap();
    params.set_buffer(GLOBAL_MEAN, Array::row(vec![0.1, 1.0 / 3.0, 1e-300])).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params, &cfg).unwrap();
    let (cfg2, params2) = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(cfg, cfg2);
    for ((n1, a), (n2, b)) in params.tensors().zip(params2.tensors()).chain(params.buffers().zip(params2.buffers())) {
        assert_eq!(n1, n2);
        let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n1}");
    }
}

#[test]
fn damaged_checkpoints_are_errors() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params, &cfg).unwrap();
    let text = String::from_utf8(buf).unwrap();

    for cut in [10, text.len() / 3, text.len() / 2, text.len() - 5] {
        let cut = (0..=cut).rev().find(|&c| text.is_char_boundary(c)).unwrap();
        assert!(read_checkpoint(&text.as_bytes()[..cut]).is_err(), "cut at {cut}");
    }

    let foreign = text.replacen("gata2floor-checkpoint 1", "gata2floor-checkpoint 7", 1);
    match read_checkpoint(foreign.as_bytes()) {
        Err(crate::Error::Version { found, .. }) => assert_eq!(found, "7"),
        other => panic!("expected version error, got {other:?}"),
    }

    let bigger = ModelConfig {
        slots: 20,
        ..cfg.clone()
    };
    let wrong_cfg = text.replacen(
        &serde_json::to_string(&cfg).unwrap(),
        &serde_json::to_string(&bigger).unwrap(),
        1,
    );
    assert!(matches!(read_checkpoint(wrong_cfg.as_bytes()), Err(crate::Error::Shape { .. })));
}
