use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navidrive"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn extract(dir: &Path) -> PathBuf {
    let manifest = dir.join("clips.jsonl");
    let scene = fixtures().join("scene.jsonl");
    ok(dir, &["extract", "--scene-log", s(&scene), "--out", s(&manifest)]);
    manifest
}

fn listing(dir: &Path) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    found.sort();
    found
}

#[test]
fn version_lists_formats() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["version"]);
    assert!(out.starts_with(&format!("navidrive {}", env!("CARGO_PKG_VERSION"))));
    assert!(out.contains("scene logs"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(dir.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["evaluate"]), Some(1));
    assert_eq!(code(&["evaluate", "--manifest", "m.jsonl", "--flags", "reason,bogus"]), Some(1));
    assert_eq!(code(&["evaluate", "--manifest", "missing.jsonl", "--mock", "oracle"]), Some(2));
    assert_eq!(code(&["rollout", "--actions", "[(1.0, oops)]"]), Some(2));

    std::fs::write(dir.path().join("bad.toml"), "[gateway]\nmax_retries = 3\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "config-dump"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_retries"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let scene = fixtures().join("scene.jsonl");
    let out = ok(dir.path(), &["--dry-run", "extract", "--scene-log", s(&scene)]);
    assert!(out.starts_with("13 clips from 1 scene(s); would write"));
    assert!(listing(dir.path()).is_empty());

    let manifest = extract(dir.path());
    let before = listing(dir.path());
    for args in [
        vec!["--dry-run", "fit-actions", "--manifest", s(&manifest)],
        vec!["--dry-run", "gen-reason", "--manifest", s(&manifest), "--mock", "oracle"],
        vec!["--dry-run", "emit-sft", "--manifest", s(&manifest)],
        vec!["--dry-run", "evaluate", "--manifest", s(&manifest), "--mock", "oracle"],
        vec!["--dry-run", "ablate", "--manifest", s(&manifest), "--mock", "oracle"],
    ] {
        let out = ok(dir.path(), &args);
        assert!(out.contains("would"), "{args:?}: {out}");
    }
    assert_eq!(listing(dir.path()), before);
}

#[test]
fn pipeline_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = extract(d);
    let first = std::fs::read(&manifest).unwrap();
    extract(d);
    assert_eq!(std::fs::read(&manifest).unwrap(), first);

    let fitted = d.join("fitted.jsonl");
    let out = ok(d, &["fit-actions", "--manifest", s(&manifest), "--out", s(&fitted)]);
    assert!(out.contains("fitted 13 clips"));
    assert!(out.contains("rollout RMSE"));

    let reasoned = d.join("reasoned.jsonl");
    let cache = d.join("cache");
    let args = [
        "gen-reason",
        "--manifest",
        s(&fitted),
        "--out",
        s(&reasoned),
        "--cache-dir",
        s(&cache),
        "--mock",
        "oracle",
    ];
    let out = ok(d, &args);
    assert!(out.contains("reasoning for 13/13 clips"), "{out}");
    let annotated = std::fs::read(&reasoned).unwrap();

    // A second run must come entirely from the cache: the echo backend would
    // return empty text.
    let mut cached = args.to_vec();
    *cached.last_mut().unwrap() = "echo";
    ok(d, &cached);
    assert_eq!(std::fs::read(&reasoned).unwrap(), annotated);

    let sft = d.join("sft");
    let out = ok(
        d,
        &["emit-sft", "--manifest", s(&reasoned), "--out", s(&sft), "--mode", "action", "--flags", "reason,command"],
    );
    assert!(out.starts_with("13 action records (reason+command)"), "{out}");
    assert_eq!(std::fs::read_to_string(sft.join("corpus.jsonl")).unwrap().lines().count(), 13);
    let readme = std::fs::read_to_string(sft.join("README.md")).unwrap();
    assert!(readme.contains("reason+command"));

    let report = |name: &str| {
        let out_dir = d.join(name);
        ok(
            d,
            &[
                "evaluate",
                "--manifest",
                s(&reasoned),
                "--out-dir",
                s(&out_dir),
                "--mock",
                "oracle",
                "--sigma",
                "0.2",
                "--seed",
                "3",
                "--mode",
                "action",
                "--six-second",
            ],
        );
        ["report.md", "report.csv", "report.jsonl"].map(|f| std::fs::read(out_dir.join(f)).unwrap())
    };
    let a = report("eval-a");
    assert_eq!(a, report("eval-b"));
    let md = String::from_utf8(a[0].clone()).unwrap();
    assert!(md.contains("L2(6s)"));
    assert!(md.contains("] action"));
}

#[test]
fn rollout_prints_waypoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["rollout", "--actions", "[(0.00, 0.000), (0.00, 0.000)]", "--speed", "2"]);
    assert_eq!(out.trim(), "[(1.00, 0.00), (2.00, 0.00)]");
    let out = ok(dir.path(), &["rollout", "--actions", "[(1.00, 0.000), (1.00, 0.000)]"]);
    assert_eq!(out.trim(), "[(0.00, 0.00), (0.25, 0.00)]");
}

#[test]
fn config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[driver]\nmodel_id = \"${DRIVER_MODEL}\"\ntemperature = 0.7\nmax_tokens = 256\n\n[eval]\nk = 4\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_navidrive"))
        .current_dir(dir.path())
        .env("DRIVER_MODEL", "ft-driver-7")
        .args(["--config", "run.toml", "config-dump"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dumped = String::from_utf8(out.stdout).unwrap();
    assert!(dumped.contains("ft-driver-7"));
    assert!(dumped.contains("k = 4"));

    std::fs::write(dir.path().join("dumped.toml"), &dumped).unwrap();
    assert_eq!(ok(dir.path(), &["--config", "dumped.toml", "config-dump"]), dumped);
}
