use gata2floor::config::RunConfig;
use gata2floor::eval::{baseline_agglomerative, metric_suite, F1Average};
use gata2floor::facade::{load_facades, save_facades};
use gata2floor::graph::{build_graph, pseudo_labels};
use gata2floor::model::{forward, load_checkpoint, save_checkpoint, Mode};
use gata2floor::synth::{generate, SynthConfig};
use gata2floor::train::{prepare, split_by_hash, train};

fn small_run() -> RunConfig {
    RunConfig::from_kv_str(
        "d_model = 16\npos_hidden = 8\ncount_hidden = 16\nbias_hidden = 4\nepochs = 30\nlr = 0.003\nseed = 4\n",
    )
    .unwrap()
}

#[test]
fn synth_file_train_checkpoint_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run();
    let records = generate(
        &SynthConfig {
            floors: (1, 4),
            seed: 4,
            ..Default::default()
        },
        40,
    )
    .unwrap();
    let data = dir.path().join("facades.jsonl");
    save_facades(&data, &records).unwrap();
    let records = load_facades(&data).unwrap();

    let (train_set, test_set) = split_by_hash(&records, |r| r.facade_id.as_str(), 0.25);
    assert!(!train_set.is_empty() && !test_set.is_empty());
    let examples = prepare(&train_set, &cfg.graph).unwrap();
    let outcome = train(&examples, &cfg.model, &cfg.train, |_, _| {}).unwrap();
    assert_eq!(outcome.log.len(), 30);
    assert!(outcome.log.last().unwrap().loss.total < outcome.log[0].loss.total);

    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params, &cfg.model).unwrap();
    let (model_cfg, params) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model_cfg, cfg.model);
    assert_eq!(params, outcome.params);

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for r in &test_set {
        let g = build_graph(r, &cfg.graph).unwrap();
        let out = forward(&g, &params, &model_cfg, Mode::Eval).unwrap();
        assert_eq!(out.assignment().len(), r.boxes.len());
        preds.push(out.count());
        truths.push(r.floor_count.unwrap() as usize);
    }
    let m = metric_suite(&preds, &truths, F1Average::Macro).unwrap();
    assert!(m.accuracy <= m.off_by_one && m.mae >= 0.0);
}

#[test]
fn agglomerative_equals_pseudo_count_on_irregular_facades() {
    let cfg = RunConfig::default();
    let records = generate(
        &SynthConfig {
            irregular: true,
            seed: 12,
            ..Default::default()
        },
        150,
    )
    .unwrap();
    for r in &records {
        let g = build_graph(r, &cfg.graph).unwrap();
        assert_eq!(baseline_agglomerative(r, g.tau).unwrap(), pseudo_labels(&g).count);
    }
}
