use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowclust(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowclust"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FLOWCLUST_OUT")
        .output()
        .expect("binary runs")
}

fn small_scenario(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, "seed = 5\ntotal_packets = 200\nflow_rate_pps = 4.0\n").unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_results_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("out");
    let o = flowclust(&["run", &cfg, "--trace"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,flow_rate_pps,num_groups,nodes_per_group,packet_size,group,mean_delay_s,mean_jitter_s,loss_ratio,tx,rx,seed"
    );
    assert_eq!(lines.count(), 3);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time,event,group,sensor,seq,delay\n"));
    assert!(trace.lines().count() > 1);
}

#[test]
fn sweep_preset_gives_one_row_per_group_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowclust(&["sweep", "fig7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 18);
    assert!(dir.path().join("summary.dat").exists());
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = flowclust(&["sweep", "fig16", "--seed", "9"], out);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(a.join("results.csv")).unwrap(),
        fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "packet_size_bytes = -512\n").unwrap();
    let o = flowclust(&["run", path.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1:"));

    let o = flowclust(&["run", "no-such-file.toml"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));

    // A sweep file is not a single scenario.
    let o = flowclust(&["run", "fig7"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = flowclust(&["run", &cfg], &blocker.join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_flowclust"))
        .args(["run", &cfg])
        .env("FLOWCLUST_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("results.csv").exists());
}

#[test]
fn dumped_sink_states_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("out");
    let o = flowclust(&["run", &cfg, "--dump-state"], &out);
    assert_eq!(o.status.code(), Some(0));
    let dump = String::from_utf8(o.stdout).unwrap();
    assert_eq!(dump.trim_end(), fs::read_to_string(out.join("state.txt")).unwrap().trim_end());
    let states: Vec<&str> = dump
        .split("[sink ")
        .filter(|s| !s.is_empty())
        .map(|s| s.split_once('\n').unwrap().1.trim_end())
        .collect();
    assert_eq!(states.len(), 3);
    assert!(states[0].contains("registry \"group-1\""));
    for s in &states[1..] {
        assert_eq!(*s, states[0]);
    }
}
