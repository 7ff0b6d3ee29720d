use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &[&str] = &[
    "--generator.n_patients=120",
    "--generator.feature_dims=[8,6,5]",
    "--train.epochs=2",
    "--train.finetune_epochs=2",
    "--train.d=4",
    "--train.intervals=5",
    "--train.batch_size=16",
    "--train.mafusion.heads=2",
    "--train.mafusion.head_dim=4",
];

fn drim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn quick(dir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend_from_slice(QUICK);
    drim(dir, &all)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = quick(d, &["generate", "--output-dir", "a", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["modality_0.csv", "modality_1.csv", "modality_2.csv", "presence.csv", "outcomes.csv"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    assert!(!d.join("a/truth_shared.csv").exists());

    let again = quick(d, &["generate", "--output-dir", "a", "--seed", "5"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));

    let snapshot = fs::read(d.join("a/modality_1.csv")).unwrap();
    let forced = quick(d, &["generate", "--output-dir", "a", "--seed", "5", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read(d.join("a/modality_1.csv")).unwrap(), snapshot);

    let truth = quick(d, &["generate", "--output-dir", "b", "--seed", "5", "--with-truth"]);
    assert_eq!(code(&truth), 0);
    for f in ["truth_shared.csv", "truth_unique_0.csv", "truth_risk.csv"] {
        assert!(d.join("b").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(d.join("b/outcomes.csv")).unwrap(), fs::read(d.join("a/outcomes.csv")).unwrap());
}

#[test]
fn train_then_evaluate_grid_and_stratify() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&quick(d, &["generate", "--output-dir", "cohort"])), 0);
    let out = quick(d, &["train", "--cohort", "cohort", "--output-dir", "runs", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = d.join("runs/mafusion-surv-seed1");
    for f in ["model.ckpt", "epochs.csv", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(header.starts_with("epoch,split,loss_total,loss_task,loss_shared,loss_adv,loss_disc,lr\n"));

    let ckpt = "runs/mafusion-surv-seed1/model.ckpt";
    let eval = quick(d, &["eval", "--checkpoint", ckpt, "--cohort", "cohort"]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let trained = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let evaluated = fs::read_to_string(run.join("eval_metrics.csv")).unwrap();
    assert_eq!(trained, evaluated);

    let grid = quick(d, &["robustness-grid", "--checkpoint", ckpt, "--cohort", "cohort"]);
    assert_eq!(code(&grid), 0, "{}", stderr(&grid));
    let text = fs::read_to_string(run.join("robustness_grid.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "run_id,seed,subset,n,train_pct,cindex,ibs,inbll,cs");
    assert_eq!(lines.count(), 7);
    let listed = quick(
        d,
        &["robustness-grid", "--checkpoint", ckpt, "--cohort", "cohort", "--force", "--subsets=[[0],[1,2]]"],
    );
    assert_eq!(code(&listed), 0, "{}", stderr(&listed));
    assert_eq!(fs::read_to_string(run.join("robustness_grid.csv")).unwrap().lines().count(), 3);

    let strat = quick(d, &["stratify", "--checkpoint", ckpt, "--cohort", "cohort"]);
    assert_eq!(code(&strat), 0, "{}", stderr(&strat));
    let km = fs::read_to_string(run.join("stratify/km_curves.csv")).unwrap();
    let mut last: Option<(String, f64)> = None;
    for line in km.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let s: f64 = f[1].parse().unwrap();
        if let Some((g, prev)) = &last {
            if g == f[2] {
                assert!(s <= *prev);
            }
        }
        last = Some((f[2].to_string(), s));
    }
    assert!(run.join("stratify/logrank.csv").exists());
}

#[test]
fn unsupervised_regime_writes_pretraining_log() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&quick(d, &["generate", "--output-dir", "cohort"])), 0);
    let out = quick(d, &["train", "--cohort", "cohort", "--output-dir", "runs", "--regime", "unsup"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(d.join("runs/mafusion-unsup-seed0/pretrain_epochs.csv").exists());
    assert!(d.join("runs/mafusion-unsup-seed0/model.ckpt").exists());
}

#[test]
fn exit_codes_separate_usage_data_and_numerical_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&drim(d, &["frobnicate"])), 1);
    assert_eq!(code(&drim(d, &["train"])), 1);
    assert_eq!(code(&drim(d, &["audit-params", "--train.no_such_field", "1"])), 1);
    assert_eq!(code(&drim(d, &["train", "--cohort", "missing"])), 2);
    assert_eq!(code(&drim(d, &["--help"])), 0);

    assert_eq!(code(&quick(d, &["generate", "--output-dir", "cohort"])), 0);
    let path = d.join("cohort/presence.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[4] = "1,x,1".into();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let bad = quick(d, &["train", "--cohort", "cohort"]);
    assert_eq!(code(&bad), 2);
    let msg = stderr(&bad);
    assert!(msg.contains("presence.csv") && msg.contains("row 5"), "{msg}");

    assert_eq!(code(&quick(d, &["generate", "--output-dir", "ok"])), 0);
    let nan = quick(
        d,
        &["train", "--cohort", "ok", "--output-dir", "runs", "--train.lr=1e250", "--train.weight_decay=0"],
    );
    assert_eq!(code(&nan), 3, "{}", stderr(&nan));
}

#[test]
fn audit_reports_tensor_reference_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = drim(tmp.path(), &["audit-params", "--output-dir", "audit"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("35446128768"));
    assert!(text.contains("37949472"));
    let csv = fs::read_to_string(tmp.path().join("audit/audit.csv")).unwrap();
    assert!(csv.starts_with("item,params,reference\n"));
}
