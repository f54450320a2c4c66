use std::path::Path;
use std::process::{Command, Output};

fn floe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floe"))
        .current_dir(dir)
        .env_remove("FLOE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = floe(dir, args);
    assert!(
        out.status.success(),
        "floe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_corpus(dir: &Path) {
    ok(
        dir,
        &["--seed", "3", "generate", "-o", "data", "--floes", "3", "--domain", "0,30", "--steps", "200", "--count", "3"],
    );
}

fn small_checkpoint(dir: &Path) {
    small_corpus(dir);
    ok(
        dir,
        &["--seed", "1", "train", "--data", "data", "-o", "ck.json", "--epochs", "2", "--pairs-per-epoch", "100", "--batch-size", "20"],
    );
}

#[test]
fn generate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.csv", "b.csv"] {
        ok(d, &["--seed", "9", "generate", "-o", name, "--floes", "4", "--domain", "0,40", "--steps", "50"]);
    }
    ok(d, &["--seed", "10", "generate", "-o", "c.csv", "--floes", "4", "--domain", "0,40", "--steps", "50"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert!(text.starts_with("# n_floes=4 dt=0.0001 domain=0,40"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 52);
}

#[test]
fn seed_from_environment_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), "seed = 9\n[generate]\nfloes = 4\ndomain = [0.0, 40.0]\nsteps = 50\n").unwrap();
    ok(d, &["--config", "cfg.toml", "generate", "-o", "file.csv"]);
    ok(d, &["--seed", "9", "generate", "-o", "flag.csv", "--floes", "4", "--domain", "0,40", "--steps", "50"]);
    let env = Command::new(env!("CARGO_BIN_EXE_floe"))
        .current_dir(d)
        .env("FLOE_SEED", "9")
        .args(["generate", "-o", "env.csv", "--floes", "4", "--domain", "0,40", "--steps", "50"])
        .output()
        .unwrap();
    assert!(env.status.success());
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("file.csv"), read("flag.csv"));
    assert_eq!(read("env.csv"), read("flag.csv"));
    // Flags beat the file.
    ok(d, &["--config", "cfg.toml", "generate", "-o", "over.csv", "--floes", "2"]);
    assert!(String::from_utf8(read("over.csv")).unwrap().starts_with("# n_floes=2 "));
}

#[test]
fn pipeline_artifacts_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_checkpoint(d);
    ok(d, &["rollout", "--checkpoint", "ck.json", "--truth", "data/traj_0000.csv", "-o", "roll.csv"]);
    ok(
        d,
        &["--seed", "4", "assimilate", "--checkpoint", "ck.json", "--truth", "data/traj_0001.csv", "-o", "mean.csv",
            "--diagnostics", "diag.csv", "--members", "10", "--interval", "50", "--filter", "etkf"],
    );
    ok(d, &["evaluate", "--checkpoint", "ck.json", "--truth", "data/traj_0002.csv", "-o", "report.txt"]);
    for artifact in ["data/traj_0002.csv", "ck.json", "roll.csv", "mean.csv", "report.txt"] {
        let out = ok(d, &["replay", artifact]);
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("identical"), "{artifact}");
    }
    let diag = std::fs::read_to_string(d.join("diag.csv")).unwrap();
    let lines: Vec<&str> = diag.lines().collect();
    assert_eq!(lines[0], "step,rmse,spread");
    assert_eq!(lines.len(), 1 + 4, "analyses at steps 50, 100, 150, 200");
    assert!(lines[1].starts_with("50,"));
}

#[test]
fn tampered_artifact_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "2", "generate", "-o", "t.csv", "--floes", "2", "--domain", "0,20", "--steps", "20"]);
    let text = std::fs::read_to_string(d.join("t.csv")).unwrap();
    let last = text.trim_end().rsplit_once('\n').unwrap().0.to_string() + "\n20,1,2,3,4\n";
    std::fs::write(d.join("t.csv"), last).unwrap();
    assert_eq!(floe(d, &["replay", "t.csv"]).status.code(), Some(2));
}

#[test]
fn evaluate_reports_keys_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_checkpoint(d);
    let out = ok(
        d,
        &["evaluate", "--checkpoint", "ck.json", "--truth", "data/traj_0000.csv", "--horizons", "50,100", "--chart", "pcc.svg"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["one_step_velocity_rmse=", "simulation_rmse=", "mean_pcc=", "pcc_floe_2=", "horizon_100_pcc=", "provenance="] {
        assert!(text.contains(key), "missing {key}");
    }
    let svg = std::fs::read_to_string(d.join("pcc.svg")).unwrap();
    assert_eq!(svg.matches("<rect x=").count(), 3);
}

#[test]
fn render_writes_strided_frames() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "-o", "t.csv", "--floes", "2", "--domain", "0,20", "--steps", "99"]);
    ok(d, &["render", "--trajectory", "t.csv", "-o", "frames", "--stride", "25"]);
    let mut names: Vec<String> = std::fs::read_dir(d.join("frames"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["frame_000000.svg", "frame_000025.svg", "frame_000050.svg", "frame_000075.svg"]);
}

#[test]
fn graph_lists_paired_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["graph", "--floes", "1", "--dense"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("nodes=3 edges=4\n"));
    assert!(text.contains("edge 0: 0 -> 1 (reverse 1)"));
    assert!(text.contains("R_s") && text.contains("R_r"));
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Usage: bad flags, bad config, impossible packing.
    assert_eq!(floe(d, &["generate"]).status.code(), Some(1));
    assert_eq!(floe(d, &["generate", "-o", "x.csv", "--floes", "many"]).status.code(), Some(1));
    std::fs::write(d.join("bad.toml"), "[generate]\nflooes = 1\n").unwrap();
    assert_eq!(floe(d, &["--config", "bad.toml", "generate", "-o", "x.csv"]).status.code(), Some(1));
    assert_eq!(
        floe(d, &["generate", "-o", "x.csv", "--floes", "20", "--domain", "0,10"]).status.code(),
        Some(1)
    );
    // Data: missing or malformed inputs.
    assert_eq!(
        floe(d, &["rollout", "--checkpoint", "nope.json", "--truth", "nope.csv", "-o", "r.csv"]).status.code(),
        Some(2)
    );
    std::fs::write(d.join("junk.csv"), "not a trajectory\n").unwrap();
    assert_eq!(floe(d, &["render", "--trajectory", "junk.csv", "-o", "f"]).status.code(), Some(2));
    assert_eq!(floe(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn assimilation_without_checkpoint_uses_contact_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "5", "generate", "-o", "t.csv", "--floes", "4", "--domain", "0,40", "--steps", "300"]);
    let out = ok(
        d,
        &["--seed", "1", "assimilate", "--truth", "t.csv", "-o", "m.csv", "--members", "20", "--sigma-model", "0"],
    );
    let line = String::from_utf8(out.stdout).unwrap();
    let rmse: f64 = line.trim().strip_prefix("mean_rmse=").unwrap().parse().unwrap();
    assert!(rmse < 1.0, "{rmse}");
}
