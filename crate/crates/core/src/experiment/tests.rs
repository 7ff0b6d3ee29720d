use super::*;
use crate::fusion::MaFusionConfig;

fn quick_spec(dir: &Path) -> ExperimentSpec {
    ExperimentSpec {
        generator: GeneratorConfig {
            n_patients: 120,
            feature_dims: vec![8, 6, 5],
            ..GeneratorConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            finetune_epochs: 2,
            d: 4,
            intervals: 5,
            batch_size: 16,
            mafusion: MaFusionConfig {
                heads: 2,
                head_dim: 4,
                slot_embeddings: true,
            },
            ..TrainConfig::default()
        },
        output_dir: dir.join("runs"),
        ..ExperimentSpec::default()
    }
}

#[test]
fn dotted_overrides_reach_nested_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "seeds = [1, 2]\n[train]\nepochs = 7\n[train.mafusion]\nheads = 8\n").unwrap();
    let spec = load_spec(
        Some(&path),
        &[
            ("train.lr".into(), "0.005".into()),
            ("train.mafusion.head_dim".into(), "3".into()),
            ("train.fusion".into(), "tensor".into()),
            ("generator.n_patients".into(), "50".into()),
            ("output_dir".into(), "elsewhere".into()),
        ],
    )
    .unwrap();
    assert_eq!(spec.seeds, vec![1, 2]);
    assert_eq!(spec.train.epochs, 7);
    assert_eq!(spec.train.lr, 0.005);
    assert_eq!(spec.train.mafusion.heads, 8);
    assert_eq!(spec.train.mafusion.head_dim, 3);
    assert_eq!(spec.train.fusion, FusionKind::Tensor);
    assert_eq!(spec.generator.n_patients, 50);
    assert_eq!(spec.output_dir, PathBuf::from("elsewhere"));

    for bad in [("train.no_such_field", "1"), ("train.lr", "\"fast\""), ("seeds.x", "1")] {
        let r = load_spec(Some(&path), &[(bad.0.into(), bad.1.into())]);
        assert!(matches!(r, Err(DrimError::Config(_))), "{bad:?}: {r:?}");
    }
    assert_eq!(load_spec(None, &[]).unwrap(), ExperimentSpec::default());
}

#[test]
fn subsets_are_enumerated_and_checked() {
    let s = all_subsets(4);
    assert_eq!(s.len(), 15);
    assert_eq!(s[0], vec![0]);
    assert_eq!(s[14], vec![0, 1, 2, 3]);
    assert_eq!(subset_label(&s[14]), "0+1+2+3");
    for bad in [vec![], vec![3], vec![1, 1]] {
        assert!(validate_subsets(&[bad], 3).is_err());
    }
}

#[test]
fn exact_patterns_partition_the_training_set() {
    let batch = generate(&GeneratorConfig::default()).unwrap();
    let total: f64 = all_subsets(3).iter().map(|s| exact_pattern_pct(&batch, s)).sum();
    assert!(total <= 100.0 + 1e-9);
    // every patient keeps at least two modalities, so singletons never occur
    for m in 0..3 {
        assert_eq!(exact_pattern_pct(&batch, &[m]), 0.0);
    }
    let manual = (0..600).filter(|&i| batch.pattern(i) == vec![true, true, true]).count();
    assert!((exact_pattern_pct(&batch, &[0, 1, 2]) - manual as f64 / 6.0).abs() < 1e-12);
}

#[test]
fn end_to_end_commands_agree_with_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path());
    let cohort_dir = dir.path().join("cohort");
    cmd_generate(&spec, &cohort_dir, true, false).unwrap();
    assert!(matches!(cmd_generate(&spec, &cohort_dir, true, false), Err(DrimError::Exists(_))));

    let (run, art) = cmd_train(&cohort_dir, &spec, FusionKind::MaFusion, 0, false).unwrap();
    assert!(matches!(
        cmd_train(&cohort_dir, &spec, FusionKind::MaFusion, 0, false),
        Err(DrimError::Exists(_))
    ));
    let logged: Vec<EpochLog> = read_rows(&art.epochs).unwrap();
    assert_eq!(logged, run.log);
    let metrics: Vec<MetricRow> = read_rows(&art.metrics).unwrap();
    assert_eq!(metrics[0].cindex, run.test.cindex);

    let eval = cmd_eval(&art.checkpoint, &cohort_dir, &dir.path().join("eval.csv")).unwrap();
    assert_eq!(eval, metrics[0]);

    let grid_path = dir.path().join("grid.csv");
    let rows = cmd_robustness_grid(&art.checkpoint, &cohort_dir, &spec, &grid_path).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(read_rows::<GridRow>(&grid_path).unwrap(), rows);
    let full = rows.iter().find(|r| r.subset == "0+1+2").unwrap();
    let same = run.splits.test.select(&run.splits.test.having_at_least(&[0, 1, 2]));
    let direct = score(&run.model, &same, spec.risk).unwrap();
    assert_eq!(full.n, same.n_patients());
    assert!((full.cindex.unwrap() - direct.cindex).abs() <= 1e-12);
    assert!((full.ibs.unwrap() - direct.ibs).abs() <= 1e-12);
    assert!((full.inbll.unwrap() - direct.inbll).abs() <= 1e-12);
    assert!((full.cs.unwrap() - direct.cs).abs() <= 1e-12);

    let strat_dir = dir.path().join("strat");
    let lr = cmd_stratify(&art.checkpoint, &cohort_dir, &strat_dir, false).unwrap();
    assert!((0.0..=1.0).contains(&lr.p));
    let points: Vec<KmPoint> = read_rows(&strat_dir.join("km_curves.csv")).unwrap();
    for g in ["high", "low"] {
        let curve: Vec<&KmPoint> = points.iter().filter(|p| p.group == g).collect();
        assert_eq!((curve[0].time, curve[0].survival), (0.0, 1.0));
        assert!(curve.windows(2).all(|w| w[1].survival <= w[0].survival && w[1].time >= w[0].time));
    }
}

#[test]
fn unsupervised_runs_write_both_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick_spec(dir.path());
    spec.train.regime = Regime::Unsup;
    let cohort_dir = dir.path().join("cohort");
    cmd_generate(&spec, &cohort_dir, false, false).unwrap();
    let (run, art) = cmd_train(&cohort_dir, &spec, FusionKind::MaFusion, 3, false).unwrap();
    assert_eq!(run.run_id, "mafusion-unsup-seed3");
    assert_eq!(run.frozen_grad_norm, 0.0);
    assert!(art.pretrain_epochs.unwrap().exists());
}

#[test]
fn grid_reports_empty_subsets_with_blank_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path());
    let data = generate(&spec.generator).unwrap();
    let run = train_run(&data, &spec, FusionKind::Mean, 0).unwrap();
    let test = run.splits.test.mask_to(&[0, 1]);
    let rows = robustness_grid(&run.model, "r", 0, &run.splits.train, &test, &all_subsets(3), spec.risk).unwrap();
    for r in &rows {
        if r.subset.contains('2') {
            assert_eq!(r.n, 0);
            assert!(r.cindex.is_none() && r.cs.is_none());
        } else {
            assert!(r.n > 0 && r.cs.is_some(), "{r:?}");
        }
    }
    let path = dir.path().join("g.csv");
    write_rows(&path, &rows, &GRID_HEADER).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().any(|l| l.starts_with("r,0,2,0,") && l.ends_with(",,,,")), "{text}");
}

#[test]
fn identical_scores_are_reported_as_a_degenerate_split() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path());
    let mut data = generate(&spec.generator).unwrap();
    let model = DrimModel::new(spec.train.model_config(data.feature_dims(), 10.0), 0).unwrap();
    for f in &mut data.features {
        f.fill(0.5);
    }
    for p in &mut data.present {
        p.fill(true);
    }
    match stratify(&model, &data, RiskScore::SumHazard) {
        Err(DrimError::DegenerateBatch(msg)) => assert!(msg.contains("tied"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn audit_reports_reference_sizes() {
    let cfg = TrainConfig::default().model_config(vec![32, 24, 16], 10.0);
    let rows = audit(&cfg).unwrap();
    let get = |item: &str| rows.iter().find(|r| r.item == item).unwrap().params.clone();
    assert_eq!(get("tensor_fusion@M=4,d=128"), "35446128768");
    assert_eq!(get("tensor_fusion@M=4,d=32"), "37949472");
    let a: usize = get("mafusion.shared_block@M=3").parse().unwrap();
    let b: usize = get("mafusion.shared_block@M=4").parse().unwrap();
    assert_eq!(b - a, 16);
    let total: usize = get("total").parse().unwrap();
    let summed: usize = rows
        .iter()
        .filter(|r| !r.item.contains('@') && r.item != "total")
        .map(|r| r.params.parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, summed);
}
