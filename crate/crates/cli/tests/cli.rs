use std::path::Path;
use std::process::Command;

use osmotic_cli::{run_cli, EXIT_CONFIG, EXIT_IO, EXIT_OK};

fn osmo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_osmo"))
        .args(args)
        .env("OSMO_LOG", "error")
        .output()
        .unwrap()
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("osmo").chain(args.iter().copied()))
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[test]
fn train_from_config_file_writes_the_run_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("simple.cfg");
    std::fs::write(&cfg, "# reference run\ncontext = simple\nepochs = 2\n").unwrap();
    let out = dir.path().join("run");
    let o = osmo(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "epochs=5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(EXIT_OK),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(o.stdout.is_empty());

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    for split in ["train", "test"] {
        let overall: Vec<_> = metrics
            .lines()
            .filter(|l| l.contains(&format!(",{split},overall,")))
            .collect();
        assert_eq!(overall.len(), 6, "{split}: epoch 0 plus 5 epochs");
    }
    for f in [
        "clusters.jsonl",
        "config.cfg",
        "run.json",
        "checkpoints/manifest.json",
        "simmat/test_0_1.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_to_string(out.join("config.cfg"))
        .unwrap()
        .contains("epochs = 5"));
}

#[test]
fn invalid_override_exits_with_config_code_naming_the_key() {
    let o = osmo(&["train", "--set", "epochs=-1", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
    let o = osmo(&["train", "--set", "gamma=3", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
}

#[test]
fn missing_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = osmo(&["eval", "--run", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    let o = osmo(&["train", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
}

#[test]
fn exports_and_eval_from_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert_eq!(
        cli(&[
            "train",
            "--set",
            "context=simple+misleading",
            "--set",
            "epochs=2",
            "--out",
            run_s
        ]),
        EXIT_OK
    );

    let sim = dir.path().join("sim");
    assert_eq!(
        cli(&[
            "export-simmat",
            "--run",
            run_s,
            "--agents",
            "0,1",
            "--split",
            "test",
            "--out",
            sim.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let rows = data_rows(&sim.join("test_0_1.csv"));
    assert_eq!(rows.len(), 191);
    assert!(rows.iter().all(|r| r.split(',').count() == 191));
    assert!(sim.join("test_0_1_cosine.csv").exists() && sim.join("test_0_1.pgm").exists());
    // the export reproduces the matrix written at the end of training
    assert_eq!(
        std::fs::read(sim.join("test_0_1.csv")).unwrap(),
        std::fs::read(run.join("simmat/test_0_1.csv")).unwrap()
    );

    assert_eq!(
        cli(&["export-simmat", "--run", run_s, "--agents", "0,9"]),
        EXIT_CONFIG
    );

    assert_eq!(cli(&["eval", "--run", run_s]), EXIT_OK);
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    for line in eval.lines().skip(1) {
        assert!(
            metrics.lines().any(|m| m == line),
            "{line} not among the final metrics"
        );
    }

    assert_eq!(cli(&["export-clusters", "--run", run_s]), EXIT_OK);
    let members = data_rows(&run.join("cluster_membership.csv"));
    assert_eq!(members[0], "epoch,agent_id,group_id");
    assert_eq!(members.len(), 1 + 4);
    assert_eq!(data_rows(&run.join("cluster_scores.csv")).len(), 1 + 16);
}

#[test]
fn generate_then_train_matches_inline_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(
        cli(&[
            "generate",
            "--set",
            "context=complex",
            "--seed",
            "9",
            "--out",
            data.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert_eq!(
        data_rows(&data.join("agent_4_train.csv"))[0],
        "t,feature_0,feature_1"
    );

    let source = format!("context=data:{}", data.display());
    assert_eq!(
        cli(&[
            "train",
            "--set",
            &source,
            "--set",
            "epochs=2",
            "--seed",
            "9",
            "--out",
            a.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert_eq!(
        cli(&[
            "train",
            "--set",
            "context=complex",
            "--set",
            "epochs=2",
            "--seed",
            "9",
            "--out",
            b.to_str().unwrap()
        ]),
        EXIT_OK
    );
    for f in ["metrics.csv", "clusters.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"context": "simple", "train": {"epochs": 1, "lambda": 0.7}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert!(std::fs::read_to_string(out.join("config.cfg"))
        .unwrap()
        .contains("lambda = 0.7"));
}
