use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stepnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepnav")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stepnav(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "train.sac.hidden=[16,16]", "--set", "train.sac.batch_size=16", "--set", "train.warmup=16", "--set", "checkpoint_every=3"];

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let envs = d.join("envs");
    let out = ok(&["gen-envs", "--count", "2", "--obstacles", "1", "--traps", "wall", "--seed", "4", "--out", p(&envs)]);
    assert!(out.contains("3 environments"), "{out}");
    assert!(envs.join("env-002.json").exists());

    let demos = d.join("demos.jsonl");
    ok(&["collect-demos", "--envs", p(&envs), "--n", "120", "--seed", "4", "--out", p(&demos)]);
    assert!(ok(&["inspect", p(&demos)]).contains("120 transitions"));

    let run = d.join("run");
    let mut args = vec!["train", "--envs", p(&envs), "--demo", p(&demos), "--episodes", "6", "--seed", "4", "--out", p(&run)];
    args.extend(SMALL);
    ok(&args);
    for f in ["curves.csv", "checkpoint-00003.snck", "checkpoint-00006.snck", "final.snck", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(ok(&["inspect", p(&run.join("final.snck"))]).contains("episodes 6"));

    let eval = d.join("eval");
    let table = ok(&[
        "eval",
        "--baseline",
        "lmpc-direct",
        "--checkpoint",
        p(&run.join("final.snck")),
        "--suite",
        p(&envs),
        "--trials",
        "2",
        "--workers",
        "2",
        "--out",
        p(&eval),
    ]);
    assert!(table.contains("lmpc-direct") && table.contains("sac:final"), "{table}");
    assert!(eval.join("metrics.csv").exists());
    let traces = eval.join("traces-lmpc-direct.jsonl");
    assert!(ok(&["inspect", p(&traces)]).contains("6 episodes"));

    let plots = d.join("plots");
    ok(&["plot", "--traces", p(&traces), "--envs", p(&envs), "--curves", p(&run.join("curves.csv")), "--out", p(&plots)]);
    let svg = fs::read_to_string(plots.join("traces-lmpc-direct-000-env0.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    assert!(plots.join("curves.svg").exists() && plots.join("curves-rolling.csv").exists());
    let series = fs::read_to_string(plots.join("traces-lmpc-direct-000-env0.csv")).unwrap();
    assert!(series.starts_with("t,com_x,com_y"));
}

#[test]
fn config_file_and_set_are_layered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small\nsuite_train.per_count = 1\nsuite_train.obstacle_counts = [0, 2]\n").unwrap();
    let out = dir.path().join("envs");
    ok(&["gen-envs", "--suite", "train", "--config", p(&cfg), "--set", "suite_train.per_count=2", "--out", p(&out)]);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn exit_codes_separate_usage_from_infeasible_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| stepnav(args).status.code().unwrap();
    assert_eq!(code(&["train", "--envs", p(&d.join("missing")), "--out", p(d)]), 2);
    assert_eq!(code(&["gen-envs", "--out", p(d)]), 2);
    assert_eq!(code(&["gen-envs", "--suite", "train", "--set", "no.such.key=1", "--out", p(d)]), 2);
    assert_eq!(code(&["gen-envs", "--count", "1", "--obstacles", "40", "--out", p(d)]), 3);
    assert_eq!(code(&["eval", "--suite", p(d), "--out", p(d)]), 2);
    assert_eq!(code(&["inspect", p(&d.join("nothing"))]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    // nothing partial left behind by the failures above
    assert_eq!(fs::read_dir(d).unwrap().count(), 0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |tag: &str| {
        let envs = d.join(format!("envs-{tag}"));
        ok(&["gen-envs", "--count", "2", "--obstacles", "2", "--seed", "9", "--out", p(&envs)]);
        let demos = d.join(format!("demos-{tag}.jsonl"));
        ok(&["collect-demos", "--envs", p(&envs), "--n", "80", "--seed", "9", "--out", p(&demos)]);
        let out = d.join(format!("run-{tag}"));
        let mut args = vec!["train", "--envs", p(&envs), "--demo", p(&demos), "--episodes", "5", "--seed", "9", "--out", p(&out)];
        args.extend(SMALL);
        ok(&args);
        let eval = d.join(format!("eval-{tag}"));
        ok(&["eval", "--checkpoint", p(&out.join("final.snck")), "--baseline", "rrt-lmpc", "--suite", p(&envs), "--trials", "2", "--out", p(&eval)]);
        [
            envs.join("env-001.json"),
            demos,
            out.join("curves.csv"),
            out.join("final.snck"),
            out.join("checkpoint-00003.snck"),
            eval.join("metrics.csv"),
            eval.join("traces-rrt-lmpc.jsonl"),
            eval.join("traces-sac-final.jsonl"),
        ]
        .map(|f| fs::read(f).unwrap())
    };
    let a = run("a");
    let b = run("b");
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!(x == y, "artifact {i} differs");
    }
}
