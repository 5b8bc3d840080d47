use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mgmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mgmap-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "map.c=4",
    "--set",
    "map.hidden=2",
    "--set",
    "policy.gru=16",
    "--set",
    "policy.embed=8",
    "--set",
    "policy.lstm=8",
    "--set",
    "train.teacher_epochs=1",
    "--set",
    "train.dagger_iterations=1",
    "--set",
    "train.trajectories=1",
    "--set",
    "train.epochs_per_iteration=1",
    "--set",
    "sim.budget=40",
];

fn world(dir: &Path) -> (PathBuf, PathBuf) {
    let w = dir.join("w");
    assert!(
        mgmap(&["--seed", "3", "--out", s(&w), "gen-world", "--count", "1"])
            .status
            .success()
    );
    let out = mgmap(&[
        "--seed",
        "3",
        "--out",
        s(&w),
        "gen-episodes",
        "--scenes",
        s(&w.join("scenes")),
        "--per-scene",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (w.join("scenes"), w.join("episodes.jsonl"))
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(mgmap(&["--nope"]).status.code(), Some(1));
    assert_eq!(mgmap(&[]).status.code(), Some(1));
    assert_eq!(
        mgmap(&["--set", "bogus=1", "gen-world"]).status.code(),
        Some(1)
    );
    assert_eq!(
        mgmap(&["--set", "seed", "gen-world"]).status.code(),
        Some(1)
    );
    assert_eq!(mgmap(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = workdir("data");
    let out = mgmap(&[
        "--out",
        s(&dir),
        "eval",
        "--oracle",
        "--scenes",
        s(&dir.join("none")),
        "--episodes",
        "missing.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.join("bad.mgg"), b"nope").unwrap();
    assert_eq!(
        mgmap(&[
            "--out",
            s(&dir),
            "inspect",
            "--grid",
            s(&dir.join("bad.mgg"))
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn world_and_oracle_eval() {
    let dir = workdir("eval");
    let (scenes, episodes) = world(&dir);
    assert_eq!(std::fs::read_dir(&scenes).unwrap().count(), 1);
    assert_eq!(
        std::fs::read_to_string(&episodes).unwrap().lines().count(),
        2
    );
    let o = dir.join("o");
    let out = mgmap(&[
        "--out",
        s(&o),
        "eval",
        "--oracle",
        "--scenes",
        s(&scenes),
        "--episodes",
        s(&episodes),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(o.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["sr"], 1.0);
    assert_eq!(
        std::fs::read_to_string(o.join("eval_episodes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let again = mgmap(&[
        "--out",
        s(&o),
        "eval",
        "--oracle",
        "--scenes",
        s(&scenes),
        "--episodes",
        s(&episodes),
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn train_dagger_eval_inspect() {
    let dir = workdir("train");
    let (scenes, episodes) = world(&dir);
    let data = ["--scenes", s(&scenes), "--episodes", s(&episodes)];
    let t = dir.join("t");
    let mut args = TINY.to_vec();
    args.extend(["--out", s(&t), "train"]);
    args.extend(data);
    let out = mgmap(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = t.join("checkpoint.mgt");
    assert_eq!(&std::fs::read(&ck).unwrap()[..4], b"MGT1");
    let metrics = std::fs::read_to_string(t.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() > 0);

    let d = dir.join("d");
    let mut args = TINY.to_vec();
    args.extend(["--out", s(&d), "dagger", "--checkpoint", s(&ck)]);
    args.extend(data);
    assert!(mgmap(&args).status.success());
    assert!(d.join("checkpoint_iter1.mgt").exists());

    // Architecture changes are refused unless forced; shape changes always.
    let e = dir.join("e");
    let mut args = TINY.to_vec();
    args.extend([
        "--set",
        "policy.cosine=true",
        "--out",
        s(&e),
        "eval",
        "--checkpoint",
        s(&ck),
    ]);
    args.extend(data);
    assert_eq!(mgmap(&args).status.code(), Some(2));
    args.push("--force");
    assert!(mgmap(&args).status.success());
    let mut args = vec!["--out", s(&e), "eval", "--checkpoint", s(&ck)];
    args.extend(data);
    assert_eq!(mgmap(&args).status.code(), Some(2));

    let i = dir.join("i");
    let id = serde_json::from_str::<serde_json::Value>(episodes_first(&episodes).as_str()).unwrap()
        ["episode_id"]
        .as_str()
        .unwrap()
        .to_string();
    let mut args = TINY.to_vec();
    args.extend([
        "--out",
        s(&i),
        "inspect",
        "--episode",
        &id,
        "--checkpoint",
        s(&ck),
    ]);
    args.extend(data);
    let out = mgmap(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        std::fs::read_to_string(i.join("trace.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 0
    );
    let grid = i.join("grids").join("step_0000_p_hat.mgg");
    let bytes = std::fs::read(&grid).unwrap();
    assert_eq!(&bytes[..4], b"MGG1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 100);
    let x = dir.join("x");
    assert!(mgmap(&[
        "--out",
        s(&x),
        "inspect",
        "--grid",
        s(&grid),
        "--format",
        "png"
    ])
    .status
    .success());
    assert!(x.join("step_0000_p_hat_c0.png").exists());
    assert_eq!(
        mgmap(&[
            "--out",
            s(&x),
            "inspect",
            "--grid",
            s(&grid),
            "--channel",
            "4"
        ])
        .status
        .code(),
        Some(1)
    );
}

fn episodes_first(p: &Path) -> String {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn gradcheck_passes() {
    let out = mgmap(&["gradcheck", "--cases", "3", "--policy-probes", "40"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("policy"));
}
