use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--data.num_classes=3",
    "--data.feature_dim=2",
    "--data.n1=12",
    "--data.m1=24",
    "--data.gamma_l=4.0",
    "--data.test_per_class=6",
    "--model.input_dim=2",
    "--model.num_classes=3",
    "--model.hidden_dims=[8]",
    "--model.embed_dim=4",
    "--train.batch_size=8",
    "--train.eval_interval=2",
];

fn ccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccl")).args(args).output().expect("binary runs")
}

fn run_small(dir: &Path, extra: &[&str]) -> Output {
    let out_dir = format!("--run.output_dir={}", dir.display());
    let mut args = vec!["run"];
    args.extend_from_slice(SMALL);
    args.push(&out_dir);
    args.extend_from_slice(extra);
    ccl(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nsteps = 3\nlearning_rate = 0.1\n").unwrap();
    let o = ccl(&["run", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = ccl(&["run", "--model.depth=3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn invalid_value_names_the_field() {
    let o = ccl(&["run", "--train.batch_size=0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
    let o = ccl(&["run", "--run.seeds=[]"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn zero_steps_reports_initial_metrics_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &["--train.steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics_seed0.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,top1,ece,prior_l1,masked_fraction,loss_cls,loss_rpl,loss_spl,lr");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("steps = 0"));
    assert!(summary.contains("wall_time_seconds"));
}

#[test]
fn two_seeds_write_two_metric_files_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &["--train.steps=4", "--run.seeds=[3, 5]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in [3, 5] {
        let csv = std::fs::read_to_string(dir.path().join(format!("metrics_seed{s}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 4, "rows at steps 0, 2, 4");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("(2 seeds, mean ± std)"));
    assert!(summary.contains("seed 3:") && summary.contains("seed 5:"));
}

#[test]
fn worker_processes_match_the_sequential_run() {
    let seq = tempfile::tempdir().unwrap();
    let par = tempfile::tempdir().unwrap();
    let seeds = "--run.seeds=[0, 1, 2]";
    assert!(run_small(seq.path(), &["--train.steps=4", seeds]).status.success());
    let o = run_small(par.path(), &["--train.steps=4", seeds, "--workers=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in 0..3 {
        let name = format!("metrics_seed{s}.csv");
        assert_eq!(std::fs::read(seq.path().join(&name)).unwrap(), std::fs::read(par.path().join(&name)).unwrap());
    }
    assert!(par.path().join("summary.txt").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_small(a.path(), &["--train.steps=6"]).status.success());
    assert!(run_small(b.path(), &["--train.steps=6"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics_seed0.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn ablate_writes_six_rows_per_regime() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("--run.output_dir={}", dir.path().display());
    let mut args = vec!["ablate", "--regimes=uniform,reversed", "--train.steps=2", &out_dir];
    args.extend_from_slice(SMALL);
    let o = ccl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.lines().nth(1).unwrap().starts_with("uniform,false,false,false,true"), "{csv}");
}

#[test]
fn ablate_rejects_unknown_regime() {
    let o = ccl(&["ablate", "--regimes=sideways", "--train.steps=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sideways"), "{}", stderr(&o));
}

#[test]
fn gradcheck_prints_a_passing_report() {
    let o = ccl(&["gradcheck", "--seeds=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("reliable_contrastive"), "{text}");
}

#[test]
fn datagen_writes_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("snap");
    let mut args = vec!["datagen", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL[..6]);
    args.extend_from_slice(&["--model.input_dim=2", "--model.num_classes=3"]);
    let o = ccl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.csv", "test.csv", "meta.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let train = std::fs::read_to_string(out.join("train.csv")).unwrap();
    assert!(train.starts_with("x0,x1,label"));
}

#[test]
fn divergence_exits_nonzero_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &["--train.steps=40", "--train.base_lr=1e12"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("diverged at step"), "{}", stderr(&o));
}
