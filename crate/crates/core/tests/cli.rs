use std::path::Path;
use std::process::{Command, Output};

use jsqd::fluid::StationaryReport;
use jsqd::mdp::MdpReport;
use jsqd::path::PLPath;
use jsqd::rate::RateBreakdown;
use jsqd::report::ExperimentReport;
use jsqd::sim::{EventSummary, Trajectory};

fn jsqd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jsqd")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stationary_buffer_one_is_sqrt2_minus_1() {
    let o = jsqd(&["stationary", "--lambda", "0.5", "--d", "2", "--buffer", "1"]);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    let q1: f64 = row[2].parse().unwrap();
    assert!((q1 - 0.4142136).abs() < 1e-7);
    assert!(stderr(&o).contains("0.41421356"));
}

#[test]
fn converge_k_emits_nine_rows() {
    let out = stdout(&jsqd(&["converge-k", "--family", "A", "--kmax", "10", "--lambda", "0.5", "--d", "2"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 10);
    let gap_col = lines[0].split(',').position(|c| c == "gap").unwrap();
    let gaps: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(gap_col).unwrap().parse().unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

#[test]
fn fluid_from_stationary_is_constant() {
    let out = stdout(&jsqd(&["fluid", "--lambda", "0.5", "--d", "2", "--init", "stationary", "--t-max", "10"]));
    let rows: Vec<Vec<f64>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 1001);
    for r in &rows {
        for (a, b) in r.iter().zip(&rows[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn exit_codes() {
    let o = jsqd(&["mdp", "--gamma", "0.6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma must lie in (0, 0.5)"));
    let o = jsqd(&["rate", "--path", "p.json", "--lambda", "1.2", "--buffer", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda must be < 1 for stationary-profile rates"));
    assert_eq!(jsqd(&["simulate", "--n", "10", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(jsqd(&["rate", "--path", "/nonexistent/p.json"]).status.code(), Some(1));
    assert_eq!(jsqd(&["--help"]).status.code(), Some(0));
}

#[test]
fn failures_leave_no_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fluid.csv");
    // single-choice tails are too heavy for depth 24
    let o = jsqd(&["fluid", "--d", "1", "--lambda", "0.9", "--init", "stationary", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn help_lists_every_shared_flag() {
    for sub in ["simulate", "fluid", "stationary", "rate", "converge-k", "mdp"] {
        let help = stdout(&jsqd(&[sub, "--help"]));
        for flag in ["--lambda", "--d", "--buffer", "--depth", "--seed", "--out", "--format", "--threads", "--config"] {
            assert!(help.contains(flag), "{sub} help lacks {flag}");
        }
        assert!(help.contains("default"), "{sub}");
    }
}

fn run_json(dir: &Path, name: &str, args: &[&str]) -> String {
    let out = dir.join(name);
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--format", "json", "--out", out.to_str().unwrap()]);
    let o = jsqd(&full);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    std::fs::read_to_string(out).unwrap()
}

#[test]
fn json_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p: PLPath = serde_json::from_str(&run_json(d, "fluid.json", &["fluid", "--t-max", "2", "--intervals", "50"])).unwrap();
    assert_eq!(p.grid_points(), 51);
    let t: Trajectory = serde_json::from_str(&run_json(d, "sim.json", &["simulate", "--n", "40", "--t-max", "2"])).unwrap();
    assert_eq!(t.times.len(), 101);
    let s: Vec<EventSummary> =
        serde_json::from_str(&run_json(d, "reps.json", &["simulate", "--n", "40", "--t-max", "2", "--replicas", "3"])).unwrap();
    assert_eq!(s.len(), 3);
    let g: StationaryReport = serde_json::from_str(&run_json(d, "gap.json", &["stationary", "--gap-kmax", "6"])).unwrap();
    assert_eq!(g.rows.len(), 6);
    let c: ExperimentReport =
        serde_json::from_str(&run_json(d, "conv.json", &["converge-k", "--family", "B", "--kmax", "5", "--intervals", "200"])).unwrap();
    assert_eq!(c.rows.len(), 4);
    let m: MdpReport = serde_json::from_str(&run_json(
        d,
        "mdp.json",
        &["mdp", "--n-list", "20,40", "--replicas", "100", "--t-max", "1"],
    ))
    .unwrap();
    assert_eq!(m.rows.len(), 2);

    // a ramp on level 1 against the stationary profile
    let ramp = PLPath::from_fn(1.0, 100, |t| {
        let mut v = vec![0.0; 5];
        v[1] = 0.1 * t;
        v
    })
    .unwrap();
    let path = d.join("ramp.json");
    std::fs::write(&path, serde_json::to_string(&ramp).unwrap()).unwrap();
    let r: RateBreakdown =
        serde_json::from_str(&run_json(d, "rate.json", &["rate", "--path", path.to_str().unwrap()])).unwrap();
    assert!((r.total - 0.0234444).abs() < 1e-6, "{}", r.total);
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"lambda": 0.5, "buffer": 1, "d": 3}"#).unwrap();
    let out = stdout(&jsqd(&["stationary", "--config", cfg.to_str().unwrap(), "--d", "2"]));
    assert!(out.lines().nth(1).unwrap().starts_with("1,0.5,0.41421356"));
}

#[test]
fn thread_count_does_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [
        vec!["mdp", "--n-list", "30,60", "--replicas", "150", "--t-max", "2", "--seed", "9"],
        vec!["mdp", "--lln", "--n-list", "30,60", "--replicas", "10", "--t-max", "2", "--seed", "9"],
        vec!["simulate", "--n", "30", "--replicas", "12", "--seed", "9"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut bytes = Vec::new();
        for threads in ["1", "3"] {
            let out = dir.path().join(format!("{i}-{threads}.csv"));
            let mut full = args.clone();
            full.extend(["--threads", threads, "--out", out.to_str().unwrap()]);
            assert!(jsqd(&full).status.success());
            bytes.push(std::fs::read(out).unwrap());
        }
        assert_eq!(bytes[0], bytes[1], "{args:?}");
    }
}
