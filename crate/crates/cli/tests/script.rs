use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::Arc;

use timefork_cli::{parse_timeline, run_script, run_script_file, HttpBackend, RunError, RunOptions, Script};
use timefork_core::branchstore::LlmSettings;
use timefork_core::lab::{ErrorCode, Lab};
use timefork_core::Tick;

fn demo_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/oil-shocks.tfs")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn opts(out: &Path) -> RunOptions {
    RunOptions {
        seed: None,
        out_dir: out.to_path_buf(),
        script_dir: PathBuf::new(),
    }
}

fn lab() -> Lab {
    Lab::in_memory(LlmSettings::default())
}

#[test]
fn demo_report_matches_golden() {
    let out = tempfile::tempdir().unwrap();
    let outcome = run_script_file(&lab(), &demo_script(), &opts(out.path()), &mut std::io::sink()).unwrap();
    let report = std::fs::read_to_string(out.path().join("oil-shocks-report.json")).unwrap();
    let path = golden("oil-shocks-report.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &report).unwrap();
    }
    assert_eq!(report, std::fs::read_to_string(&path).unwrap());

    let r = &outcome.reports["ab"];
    assert_eq!(r.common_ancestor_tick, Tick(30));
    assert_eq!(r.first_divergence_tick, Some(Tick(31)));
    assert_eq!(outcome.artifacts.len(), 3);
}

#[test]
fn empty_script_does_nothing() {
    let out = tempfile::tempdir().unwrap();
    let script = Script::parse("# nothing here\n\n").unwrap();
    let outcome = run_script(&lab(), &script, &opts(&out.path().join("o")), &mut std::io::sink()).unwrap();
    assert!(outcome.branches.is_empty() && outcome.artifacts.is_empty());
    assert!(!out.path().join("o").exists());
}

#[test]
fn execution_error_stops_the_run() {
    let out = tempfile::tempdir().unwrap();
    let script = Script::parse("create a\nadvance a 3\nfork a 9 as=b\nexport a\n").unwrap();
    match run_script(&lab(), &script, &opts(out.path()), &mut std::io::sink()) {
        Err(e @ RunError::Execution { line: 3, .. }) => {
            assert_eq!(e.exit_code(), 2);
            let RunError::Execution { error, .. } = e else { unreachable!() };
            assert_eq!(error.code, ErrorCode::TickBeyondHead);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(std::fs::read_dir(out.path()).unwrap().next().is_none(), "nothing written after the failure");
}

fn binary(args: &[&str], cwd: &Path) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_timefork"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.tfs"), "create a seed=3\nadvance a 4\nexport a out=a.jsonl\n").unwrap();
    std::fs::write(dir.path().join("beyond.tfs"), "create a\nadvance a 3\nfork a 9 as=b\n").unwrap();
    std::fs::write(dir.path().join("typo.tfs"), "create a\nadvanse a 3\n").unwrap();

    let ok = binary(&["run", "ok.tfs", "--out", "res"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("sim1-b1"));
    assert_eq!(parse_timeline(&std::fs::read_to_string(dir.path().join("res/a.jsonl")).unwrap()).unwrap().len(), 5);

    let beyond = binary(&["run", "beyond.tfs"], dir.path());
    assert_eq!(beyond.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&beyond.stderr).contains("TICK_BEYOND_HEAD"));

    let typo = binary(&["run", "typo.tfs"], dir.path());
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("line 2"));

    let missing = binary(&["run", "absent.tfs"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn seed_override_changes_every_create() {
    let script = Script::parse("create a seed=1\ncreate b seed=2\nadvance a 5\nadvance b 5\n").unwrap();
    let mut o = opts(Path::new("unused"));
    o.seed = Some(9);
    let outcome = run_script(&lab(), &script, &o, &mut std::io::sink()).unwrap();
    assert_eq!(outcome.branches["a"].head_hash, outcome.branches["b"].head_hash);
    let plain = run_script(&lab(), &script, &opts(Path::new("unused")), &mut std::io::sink()).unwrap();
    assert_ne!(plain.branches["a"].head_hash, plain.branches["b"].head_hash);
}

#[test]
fn exports_round_trip_and_share_prefixes() {
    let out = tempfile::tempdir().unwrap();
    let script = Script::parse(
        "create p\nadvance p 20\nfork p 12 as=c\nadvance c 5\n\
         export p from=0 to=12 out=p.jsonl\nexport c from=0 to=12 out=c.jsonl\nexport c out=c-all.jsonl\n",
    )
    .unwrap();
    let lab = lab();
    let outcome = run_script(&lab, &script, &opts(out.path()), &mut std::io::sink()).unwrap();
    let read = |n: &str| std::fs::read_to_string(out.path().join(n)).unwrap();
    assert_eq!(read("p.jsonl"), read("c.jsonl"));
    let all = parse_timeline(&read("c-all.jsonl")).unwrap();
    assert_eq!(all.len(), 18);
    assert_eq!(all, lab.timeline(&outcome.branches["c"].branch_id, Tick(0), None).unwrap());
    // Post counts agree with a recount of the exported feed.
    for r in &all {
        assert_eq!(r.post_count as usize, r.posts.len());
        assert_eq!(r.trade_count as usize, r.trades.len());
    }
}

#[test]
fn http_backend_matches_embedded() {
    let served = Arc::new(lab());
    let addr = timefork_server::spawn_background(([127, 0, 0, 1], 0).into(), served).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let remote = run_script_file(&HttpBackend::new(format!("http://{addr}")), &demo_script(), &opts(a.path()), &mut std::io::sink()).unwrap();
    let local = run_script_file(&lab(), &demo_script(), &opts(b.path()), &mut std::io::sink()).unwrap();
    assert_eq!(remote.branches, local.branches);
    for name in ["oil-shocks-report.json", "explosion.jsonl", "opec.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn persisted_runs_reopen() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let script = Script::parse("create a\nadvance a 12\nfork a 6 as=b\nadvance b 3\n").unwrap();
    let first = {
        let lab = Lab::open(data.path(), LlmSettings::default()).unwrap();
        run_script(&lab, &script, &opts(out.path()), &mut std::io::sink()).unwrap()
    };
    let lab = Lab::open(data.path(), LlmSettings::default()).unwrap();
    for b in first.branches.values() {
        assert_eq!(&lab.branch(&b.branch_id).unwrap(), b);
        assert_eq!(lab.replay(&b.branch_id).unwrap(), b.head_hash);
    }
    // A second run allocates fresh ids next to the first.
    let again = run_script(&lab, &script, &opts(out.path()), &mut std::io::sink()).unwrap();
    assert_eq!(again.branches["a"].branch_id.as_str(), "sim2-b1");
}
