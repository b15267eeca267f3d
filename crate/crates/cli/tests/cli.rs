use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wmage_core::experiment::{load_splits_csv, read_manifest, Cohort, MetricsReport};

fn wmage(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmage"))
        .current_dir(dir)
        .args(args)
        .env_remove("WMAGE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = wmage(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn small_phantom(dir: &Path, name: &str) {
    ok(
        dir,
        &[
            "phantom",
            "--n",
            "20",
            "--grid",
            "12",
            "--n-impaired",
            "4",
            "--out",
            name,
            "--seed",
            "7",
        ],
    );
}

#[test]
fn phantom_is_deterministic_and_recorded() {
    let t = tempfile::tempdir().unwrap();
    small_phantom(t.path(), "a");
    small_phantom(t.path(), "b");
    let (a, b) = (
        dir_contents(&t.path().join("a")),
        dir_contents(&t.path().join("b")),
    );
    assert_eq!(a, b);
    assert_eq!(
        a.len(),
        24 * 2 + 5,
        "volumes, labels, manifest, rois, spec, run.lock"
    );
    assert!(!a.contains_key(".wmage.lock"));

    let lock: serde_json::Value = serde_json::from_slice(&a["run.lock"]).unwrap();
    assert_eq!(lock["command"], "phantom");
    assert_eq!(lock["seed"], 7);
    assert_eq!(lock["config"]["n_participants"], "20");
    let manifest_sum = lock["outputs"]["manifest.csv"].as_str().unwrap();
    assert_eq!(manifest_sum.len(), 64);

    ok(
        t.path(),
        &[
            "phantom",
            "--n",
            "20",
            "--grid",
            "12",
            "--n-impaired",
            "4",
            "--out",
            "c",
            "--seed",
            "8",
        ],
    );
    assert_ne!(
        dir_contents(&t.path().join("c"))["ph0001_fa.nii"],
        a["ph0001_fa.nii"]
    );
}

#[test]
fn phantom_config_file_with_flag_override() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join("ph.txt"),
        "# small cohort\nn_participants = 12\ngrid = 10\nseed = 1\n",
    )
    .unwrap();
    ok(
        t.path(),
        &["phantom", "--config", "ph.txt", "--seed", "5", "--out", "p"],
    );
    let lock: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("p/run.lock")).unwrap()).unwrap();
    assert_eq!(lock["seed"], 5);
    assert_eq!(lock["config"]["grid"], "10x10x10");
    let m = read_manifest(&fs::read_to_string(t.path().join("p/manifest.csv")).unwrap()).unwrap();
    assert_eq!(m.len(), 12);
}

#[test]
fn split_honours_fold_invariants() {
    let t = tempfile::tempdir().unwrap();
    small_phantom(t.path(), "ph");
    ok(
        t.path(),
        &[
            "split",
            "--manifest",
            "ph/manifest.csv",
            "--folds",
            "5",
            "--out",
            "splits.csv",
        ],
    );
    let s = load_splits_csv(&fs::read_to_string(t.path().join("splits.csv")).unwrap()).unwrap();
    assert_eq!(
        s.folds.iter().map(Vec::len).collect::<Vec<_>>(),
        vec![4, 3, 3, 3, 3]
    );
    assert_eq!(s.test_normal.len(), 4);
    assert_eq!(s.test_impaired.len(), 4);
    assert!(t.path().join("splits.csv.run.lock").is_file());

    let bad = wmage(
        t.path(),
        &[
            "split",
            "--manifest",
            "ph/manifest.csv",
            "--folds",
            "3",
            "--out",
            "s3.csv",
        ],
    );
    assert_eq!(code(&bad), 1);
    assert!(!t.path().join("s3.csv").exists());
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    let t = tempfile::tempdir().unwrap();
    let out = wmage(t.path(), &["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&wmage(t.path(), &["split", "--manifest"])), 1);
    assert_eq!(code(&wmage(t.path(), &[])), 1);

    let out = wmage(
        t.path(),
        &[
            "train",
            "--config",
            "missing.cfg",
            "--manifest",
            "m.csv",
            "--splits",
            "s.csv",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
    assert!(!t.path().join("run").exists());

    fs::write(t.path().join("m.csv"), "participant_id,site\n").unwrap();
    assert_eq!(
        code(&wmage(
            t.path(),
            &["split", "--manifest", "m.csv", "--out", "s.csv"]
        )),
        2
    );
    assert!(!t.path().join("s.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_wmage"))
        .current_dir(t.path())
        .args(["split", "--manifest", "m.csv", "--out", "s.csv"])
        .env("WMAGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn help_lists_every_flag() {
    let t = tempfile::tempdir().unwrap();
    let expect: &[(&str, &[&str])] = &[
        (
            "phantom",
            &[
                "--out",
                "--config",
                "--n",
                "--grid",
                "--rois",
                "--noise-fa",
                "--noise-md",
                "--n-impaired",
                "--impaired-gap",
                "--age-shift-test",
                "--seed",
            ],
        ),
        ("extract", &["--manifest", "--out", "--rois"]),
        (
            "split",
            &["--manifest", "--out", "--folds", "--test-fraction"],
        ),
        (
            "train",
            &[
                "--config",
                "--manifest",
                "--splits",
                "--features",
                "--rois",
                "--out",
                "--model",
                "--loss",
                "--lr",
                "--lr-schedule",
                "--batch-size",
                "--max-epochs",
                "--input-size",
                "--md-scale",
                "--weight-decay",
                "--feature-norm",
                "--seed",
            ],
        ),
        (
            "evaluate",
            &[
                "--run",
                "--manifest",
                "--splits",
                "--features",
                "--rois",
                "--out",
            ],
        ),
        ("report", &["--metrics", "--out", "--compare"]),
        ("plot", &["--metrics", "--out"]),
    ];
    for (cmd, flags) in expect {
        let out = ok(t.path(), &[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    ok(t.path(), &["--help"]);
}

#[test]
fn concurrent_runs_on_one_directory_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("busy")).unwrap();
    fs::write(t.path().join("busy/.wmage.lock"), "123\n").unwrap();
    let out = wmage(
        t.path(),
        &["phantom", "--n", "10", "--grid", "8", "--out", "busy"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert_eq!(fs::read_dir(t.path().join("busy")).unwrap().count(), 1);
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    small_phantom(p, "ph");
    ok(
        p,
        &[
            "split",
            "--manifest",
            "ph/manifest.csv",
            "--out",
            "work/splits.csv",
        ],
    );
    ok(
        p,
        &[
            "extract",
            "--manifest",
            "ph/manifest.csv",
            "--out",
            "work/features.csv",
        ],
    );
    let header = fs::read_to_string(p.join("work/features.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 1 + 33);

    fs::write(
        p.join("cfg.txt"),
        "model = roi_mlp:33-8-1\nloss = mse\nlr = 0.5\nmax_epochs = 15\nbatch_size = 8\n",
    )
    .unwrap();
    let train = |out: &str, seed: &str| {
        let args = [
            "train",
            "--config",
            "cfg.txt",
            "--manifest",
            "ph/manifest.csv",
            "--splits",
            "work/splits.csv",
            "--features",
            "work/features.csv",
            "--lr",
            "0.01",
            "--seed",
            seed,
            "--out",
            out,
        ];
        ok(p, &args);
    };
    train("run_a", "3");
    train("run_b", "3");
    let a = dir_contents(&p.join("run_a"));
    assert_eq!(a, dir_contents(&p.join("run_b")));
    for f in [
        "config.txt",
        "fold1.ckpt",
        "fold5.ckpt",
        "history.csv",
        "metrics.jsonl",
        "table.txt",
        "kde.csv",
        "predictions.csv",
        "run.lock",
    ] {
        assert!(a.contains_key(f), "missing {f}");
    }
    let cfg = String::from_utf8_lossy(&a["config.txt"]).into_owned();
    assert!(
        cfg.contains("lr = 0.01") && cfg.contains("seed = 3"),
        "flag wins over file: {cfg}"
    );
    assert_eq!(
        String::from_utf8_lossy(&a["history.csv"]).lines().count(),
        1 + 5 * 15
    );

    let report = MetricsReport::from_jsonl(&String::from_utf8_lossy(&a["metrics.jsonl"])).unwrap();
    assert_eq!(report.per_fold_mae.len(), 5);
    assert_eq!(report.gaps[&Cohort::Normal].len(), 4);
    assert_eq!(report.gaps[&Cohort::Impaired].len(), 4);

    // evaluating the stored checkpoints on the volumes reproduces training's numbers
    ok(
        p,
        &[
            "evaluate",
            "--run",
            "run_a",
            "--manifest",
            "ph/manifest.csv",
            "--splits",
            "work/splits.csv",
            "--out",
            "eval",
        ],
    );
    let e = dir_contents(&p.join("eval"));
    assert_eq!(e["metrics.jsonl"], a["metrics.jsonl"]);
    assert_eq!(e["predictions.csv"], a["predictions.csv"]);

    train("run_c", "4");
    let out = ok(
        p,
        &[
            "report",
            "--metrics",
            "run_a/metrics.jsonl",
            "run_c/metrics.jsonl",
            "--compare",
            "val",
            "--out",
            "rep/table.txt",
        ],
    );
    let table = fs::read_to_string(p.join("rep/table.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), table);
    assert!(table.contains("paired t-tests") && table.contains("df = 4"));
    assert_eq!(
        code(&wmage(
            p,
            &[
                "report",
                "--metrics",
                "run_a/metrics.jsonl",
                "--compare",
                "bogus",
                "--out",
                "r.txt"
            ]
        )),
        1
    );

    ok(
        p,
        &[
            "plot",
            "--metrics",
            "run_a/metrics.jsonl",
            "run_c/metrics.jsonl",
            "--out",
            "plots",
        ],
    );
    let plots = dir_contents(&p.join("plots"));
    for f in [
        "roi_mlp_33-8-1_kde.csv",
        "roi_mlp_33-8-1_kde.svg",
        "roi_mlp_33-8-1_2_kde.csv",
        "roi_mlp_33-8-1_2_kde.svg",
    ] {
        assert!(plots.contains_key(f), "missing {f}");
    }
    let svg = String::from_utf8_lossy(&plots["roi_mlp_33-8-1_kde.svg"]).into_owned();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2, "one curve per cohort");
    let csv = String::from_utf8_lossy(&plots["roi_mlp_33-8-1_kde.csv"]).into_owned();
    assert_eq!(csv.lines().next(), Some("cohort,x,density"));
    assert_eq!(csv.lines().count(), 1 + 2 * 256);
}

#[test]
fn thread_cap_does_not_change_results() {
    let t = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_wmage"))
            .current_dir(t.path())
            .args(["phantom", "--n", "8", "--grid", "10", "--out", name])
            .env("WMAGE_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        dir_contents(&t.path().join(name))
    };
    assert_eq!(run("one", "1"), run("four", "4"));
}
