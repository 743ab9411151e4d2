use std::path::Path;

use mrmp::checkpoint::load_checkpoint;
use mrmp::config::RunConfig;
use mrmp::error::CliError;
use mrmp::formats::graph::read_graph;
use mrmp::formats::sparse::write_sparse;
use mrmp::pipeline::{self, Model};
use mrmp::synthetic;
use mrmp_core::data::{Dataset, InputType, Instance};
use mrmp_core::relgraph::{GraphOptions, RelationGraph, RelationKind};

fn small_cfg() -> RunConfig {
    RunConfig { d_model: 16, n_heads: 2, epochs: 2, patience: 0, batch_size: 16, ..RunConfig::default() }
}

fn dataset(labels: &[Vec<usize>]) -> Dataset {
    let instances = labels
        .iter()
        .enumerate()
        .map(|(i, l)| Instance { tokens: vec![i % 5, 5 + l.first().copied().unwrap_or(0)], labels: l.clone() })
        .collect();
    Dataset::new(InputType::BinaryVector, 3, 10, instances).unwrap()
}

#[test]
fn two_epochs_write_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic::token_copy(50, 10, 30, 6, 0);
    let out = pipeline::train(&small_cfg(), &ds, None, None, Some(dir.path())).unwrap();
    assert_eq!(out.epochs_run, 2);
    let log = std::fs::read_to_string(dir.path().join(pipeline::TRAIN_LOG)).unwrap();
    assert_eq!(log, out.log);
    assert_eq!(log.lines().next().unwrap(), pipeline::LOG_HEADER);
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join(pipeline::CONFIG_ECHO).exists());
    let ckpt = load_checkpoint(&dir.path().join(pipeline::CHECKPOINT_DIR)).unwrap();
    assert_eq!(ckpt.params.tensors(), out.params.tensors());
    for k in RelationKind::ALL {
        assert_eq!(ckpt.graph.edges(k), out.graph.edges(k));
    }
    let a = pipeline::scores(&ckpt.params, &ckpt.graph, &ds).unwrap();
    let b = pipeline::scores(&out.params, &out.graph, &ds).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_gives_identical_runs() {
    let ds = synthetic::planted(60, 4);
    let a = pipeline::train(&small_cfg(), &ds, None, None, None).unwrap();
    let b = pipeline::train(&small_cfg(), &ds, None, None, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params.tensors(), b.params.tensors());
    let c = pipeline::train(&RunConfig { seed: 1, ..small_cfg() }, &ds, None, None, None).unwrap();
    assert_ne!(a.params.tensors(), c.params.tensors());
}

#[test]
fn edgeless_graph_makes_the_ablation_coincide() {
    let ds = synthetic::token_copy(40, 5, 20, 4, 2);
    let empty = RelationGraph::empty(5);
    let with = pipeline::train(&small_cfg(), &ds, None, Some(empty.clone()), None).unwrap();
    let cfg = RunConfig { mrmp: false, ..small_cfg() };
    let without = pipeline::train(&cfg, &ds, None, Some(empty.clone()), None).unwrap();
    let a = pipeline::scores(&with.params, &with.graph, &ds).unwrap();
    let b = pipeline::scores(&without.params, &without.graph, &ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(with.log, without.log);
}

#[test]
fn disabling_the_relation_module_drops_the_relational_loss() {
    let ds = synthetic::planted(80, 1);
    let cfg = RunConfig { mrmp: false, ..small_cfg() };
    let out = pipeline::train(&cfg, &ds, None, None, None).unwrap();
    assert!(!out.params.config.mrmp_enabled);
    for line in out.log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], f[3], "total must equal l_bce: {line}");
    }
    let full = pipeline::train(&small_cfg(), &ds, None, None, None).unwrap();
    assert_ne!(out.log, full.log);
}

#[test]
fn copied_and_exclusive_labels_give_one_edge_each() {
    let copy: Vec<Vec<usize>> = (0..40).map(|i| if i % 2 == 0 { vec![0, 1] } else { vec![2] }).collect();
    let g = pipeline::build_graph(&dataset(&copy), &GraphOptions::default()).unwrap();
    assert!(g.has_edge(RelationKind::Pulling, 0, 1));
    assert_eq!(g.edge_count(RelationKind::Pulling), 1);

    // label 2 is on for half of each group, independent of 0 and 1
    let exclusive: Vec<Vec<usize>> = (0..40)
        .map(|i| {
            let mut l = vec![i % 2];
            if (i / 2) % 2 == 0 {
                l.push(2);
            }
            l
        })
        .collect();
    let g = pipeline::build_graph(&dataset(&exclusive), &GraphOptions::default()).unwrap();
    assert!(g.has_edge(RelationKind::Pushing, 0, 1));
    assert_eq!(g.edge_count(RelationKind::Pushing) + g.edge_count(RelationKind::Pulling), 1);
}

#[test]
fn larger_alpha_keeps_every_edge() {
    let ds = synthetic::planted(300, 8);
    let mut prev: Option<RelationGraph> = None;
    for alpha in [0.001, 0.01, 0.05, 0.2] {
        let g = pipeline::build_graph(&ds, &GraphOptions { alpha, yates: false }).unwrap();
        if let Some(p) = &prev {
            for k in RelationKind::ALL {
                assert!(p.edges(k).iter().all(|&(i, j)| g.has_edge(k, i, j)), "alpha {alpha}");
            }
        }
        prev = Some(g);
    }
}

#[test]
fn degenerate_label_sets_are_rejected() {
    let constant: Vec<Vec<usize>> = (0..10).map(|_| vec![0]).collect();
    let err = pipeline::build_graph(&dataset(&constant), &GraphOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn metrics_table_has_one_row_per_label_auc() {
    let ds = synthetic::token_copy(30, 6, 20, 4, 5);
    let out = pipeline::train(&small_cfg(), &ds, None, None, None).unwrap();
    let report = pipeline::evaluate(Model::from(&out), Some(&ds), &ds, &RunConfig::default().threshold_grid).unwrap();
    let csv = pipeline::metrics_csv(&report);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 + 6);
    assert!(rows[..4].iter().map(|r| r.split(',').next().unwrap()).eq(["acc", "ebf1", "mif1", "maf1"].into_iter()));
}

#[test]
fn ablation_of_identical_models_has_zero_deltas() {
    let ds = synthetic::planted(120, 2);
    let out = pipeline::train(&small_cfg(), &ds, None, None, None).unwrap();
    let r = pipeline::ablation_report(Model::from(&out), Model::from(&out), &ds, &out.graph, 3).unwrap();
    assert!(r.per_label.iter().filter_map(|d| d.delta()).all(|d| d == 0.0));
    for k in RelationKind::ALL {
        assert_eq!(r.groups.iter().filter(|g| g.relation == k).count(), 3);
    }
    assert_eq!(r.labels_csv().lines().count(), 1 + ds.num_labels);
}

#[test]
fn bench_covers_the_grid() {
    let rows = pipeline::bench(&[8, 16, 32], &[4, 6], 8, 1, 0).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(pipeline::bench_csv(&rows).lines().count(), 7);
}

#[test]
fn label_count_mismatch_is_reported() {
    let a = synthetic::token_copy(20, 5, 20, 4, 0);
    let b = synthetic::token_copy(20, 6, 20, 4, 0);
    let Err(err) = pipeline::train(&small_cfg(), &a, Some(&b), None, None) else { panic!("mismatch accepted") };
    assert!(matches!(err, CliError::LabelMismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 5);
}

fn run(args: &[&str], cwd: &Path) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mrmp")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ds = synthetic::planted(200, 3);
    write_sparse(&ds.subset(&(0..150).collect::<Vec<_>>()), &d.join("train.txt")).unwrap();
    write_sparse(&ds.subset(&(150..200).collect::<Vec<_>>()), &d.join("test.txt")).unwrap();
    let small = ["--set", "d_model=16", "--set", "n_heads=2"];

    let o = run(&["build-graph", "--train", "train.txt", "--out", "g"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g = read_graph(&d.join("g/graph.txt")).unwrap();
    assert!(g.edge_count(RelationKind::Pulling) > 0);

    let mut args = vec!["train", "--train", "train.txt", "--graph", "g/graph.txt", "--epochs", "2", "--out", "full"];
    args.extend(small);
    let o = run(&args, d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut args = vec!["train", "--train", "train.txt", "--epochs", "2", "--no-mrmp", "--out", "abl"];
    args.extend(small);
    assert!(run(&args, d).status.success());

    let o = run(&["evaluate", "--checkpoint", "full/checkpoint", "--test", "test.txt", "--out", "ev"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap().lines().count(), 1 + 4 + 10);

    let o = run(&["ablation-report", "--with", "full/checkpoint", "--without", "abl/checkpoint", "--test", "test.txt", "--out", "ab"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ab/ablation_labels.csv").exists());

    let o = run(&["predict", "--checkpoint", "full/checkpoint", "--input", "test.txt", "--out", "pr"], d);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.join("pr/predictions.csv")).unwrap().lines().count(), 1 + 50);

    let o = run(&["stats", "--input", "train.txt"], d);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("150"));
}

#[test]
fn command_line_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| run(args, d).status.code().unwrap();
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&["stats", "--input", "missing.txt"]), 1);
    std::fs::write(d.join("bad.txt"), "2 4 3\n0 1:1\nnot a line\n").unwrap();
    let o = run(&["stats", "--input", "bad.txt"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error code=2"));
    let constant: Vec<Vec<usize>> = (0..10).map(|_| vec![0]).collect();
    write_sparse(&dataset(&constant), &d.join("flat.txt")).unwrap();
    assert_eq!(code(&["build-graph", "--train", "flat.txt"]), 3);
    assert_eq!(code(&["evaluate", "--checkpoint", "nowhere", "--test", "flat.txt"]), 1);
}
