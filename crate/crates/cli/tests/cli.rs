use std::process::Command;

fn semnav() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semnav"))
}

#[test]
fn run_writes_results_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let traces = dir.path().join("traces");
    let o = semnav()
        .args(["run", "--episode", "lk_pillow", "--episode", "ah_apple", "--out"])
        .arg(&out)
        .arg("--trace-dir")
        .arg(&traces)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "episode,success,steps,p,l,spl");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("lk_pillow,1,"));
    assert!(traces.join("lk_pillow.trace.json").exists());
    assert!(traces.join("ah_apple.graph.jsonl").exists());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("1.0000"), "{table}");
}

#[test]
fn same_seed_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = semnav()
            .args(["run", "--fp", "0.1", "--fn", "0.1", "--seed", "3", "--no-captions", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a.lines().count(), 17);
    assert_eq!(a, run("b.csv"));
}

#[test]
fn ablate_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let o = semnav()
        .args(["ablate", "--seeds", "1", "--episode", "tt_apple", "--episode", "lk_cup", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    for row in ["full", "no_stm", "no_pruner", "no_captions"] {
        assert!(table.contains(row), "{table}");
    }
    let csv = std::fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn served_auto_run_finishes() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = semnav()
        .args(["run", "--episode", "lk_cup", "--mode", "auto", "--serve", &port.to_string(), "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out).unwrap().contains("lk_cup,1,"));
}

#[test]
fn unknown_episode_is_an_error() {
    let o = semnav().args(["run", "--episode", "nope"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no episode named 'nope'"));
}
