use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn madeval(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_madeval"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "madeval {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn templates() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates")
}

const CONFIG: &str = r#"
seed = 11
pool = "pool.jsonl"

[selection]
k = 3

[elo]
replicates = 50

[simulation]
skills = { alpha = 1200.0, beta = 1100.0, gamma = 1000.0, delta = 1150.0 }

[[models]]
id = "alpha"
display_name = "Alpha"
provider = "stub"

[[models]]
id = "beta"
provider = "stub"

[[models]]
id = "gamma"
provider = "stub"

[[models]]
id = "delta"
provider = "stub"
deferred = true
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("competition.toml"), CONFIG).unwrap();
    let seeds: String = (0..6)
        .map(|i| format!("{{\"text\": \"Write a short poem about the number {i} and the sea.\"}}\n"))
        .collect();
    std::fs::write(dir.path().join("seeds.jsonl"), seeds).unwrap();
    let t = templates();
    madeval(
        dir.path(),
        &["pool", "--seeds", "seeds.jsonl", "--scenario", "writing", "--templates", t.to_str().unwrap(), "--generators", "alpha,beta", "--rounds", "2"],
    );
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn pool_command_grows_the_seeds() {
    let dir = workspace();
    let pool = String::from_utf8(read(dir.path(), "pool.jsonl")).unwrap();
    // Six seeds, two seeds-only rounds of one child each.
    assert_eq!(pool.lines().count(), 18);
    assert!(dir.path().join("pool.evolution.jsonl").exists());
}

#[test]
fn simulated_run_is_reproducible_with_a_fixed_clock() {
    let a = workspace();
    let b = workspace();
    for d in [&a, &b] {
        let out = madeval(d.path(), &["--fixed-clock", "run", "--simulate"]);
        let board = String::from_utf8(out.stdout).unwrap();
        assert!(board.contains("Alpha"), "{board}");
    }
    for f in [
        "pool.jsonl",
        "state/responses.jsonl",
        "state/selections.jsonl",
        "state/tasks.jsonl",
        "state/judgments.jsonl",
        "state/ratings.json",
        "state/reports/leaderboard.txt",
        "state/reports/win_matrix.csv",
        "state/reports/srcc_curve.csv",
    ] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
}

#[test]
fn staged_commands_and_model_addition() {
    let dir = workspace();
    let d = dir.path();
    madeval(d, &["--fixed-clock", "respond"]);
    madeval(d, &["select", "--k", "2"]);
    madeval(d, &["judge-sim"]);
    let out = madeval(d, &["rank", "--replicates", "20"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().filter(|l| l.contains("alpha") || l.contains("Alpha")).count(), 1);
    let tasks = String::from_utf8(read(d, "state/tasks.jsonl")).unwrap();
    assert_eq!(tasks.lines().count(), 3 * 2);

    let out = madeval(d, &["--fixed-clock", "add-model", "delta", "--k", "2"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("6 new tasks"));
    madeval(d, &["judge-sim"]);
    madeval(d, &["rank"]);
    let report = madeval(d, &["report"]);
    assert!(String::from_utf8(report.stdout).unwrap().contains("win_matrix.csv"));
    let ratings = String::from_utf8(read(d, "state/reports/ratings.csv")).unwrap();
    assert!(ratings.contains("delta"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_madeval"))
        .current_dir(dir.path())
        .args(["rank"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no competition state"));
}
