use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inertia_mpc::export::read_trajectory_csv;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inertia-mpc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn simulate_reaches_the_energy_floor_at_fifteen_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("two_bus.scn");
    let out = run(&["simulate", sc.to_str().unwrap(), "--regime", "cc"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read_trajectory_csv(std::fs::File::open(dir.path().join("two_bus_simulate.csv")).unwrap()).unwrap();
    let (t, e) = (table.column("t").unwrap(), table.column("E_1").unwrap());
    let first = (0..t.len()).find(|&k| e[k] <= -45.0 + 1e-9).unwrap();
    assert!((t[first] - 15.0).abs() < 1e-9, "reached at {}", t[first]);
    for suffix in ["constraints.txt", "objective.txt"] {
        assert!(dir.path().join(format!("two_bus_simulate_{suffix}")).exists());
    }
}

#[test]
fn mpc_with_zero_duration_writes_header_and_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("two_bus.scn");
    let out = run(&["mpc", sc.to_str().unwrap(), "--ttotal", "0"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("two_bus_mpc.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn dmpc_writes_admm_report() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("two_bus.scn");
    let out = run(&["dmpc", sc.to_str().unwrap(), "--ttotal", "0.05"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("two_bus_dmpc_admm.csv")).unwrap();
    assert!(report.starts_with("t,sqp_iteration,rounds"));
    assert!(report.lines().count() > 5);
    assert!(report.lines().skip(1).all(|l| l.contains("Converged")));
}

#[test]
fn compare_ranks_all_four_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("two_bus.scn");
    let out = run(&["compare", sc.to_str().unwrap(), "--ttotal", "0.5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("two_bus_ranking.csv")).unwrap();
    let codes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let mut sorted = codes.clone();
    sorted.sort();
    assert_eq!(sorted, ["cc", "cv", "vc", "vv"]);
    for code in ["cc", "cv", "vc", "vv"] {
        assert!(dir.path().join(format!("two_bus_mpc_{code}.csv")).exists());
    }
}

#[test]
fn exit_codes_separate_validation_and_io() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["mpc", "no/such/file.scn"], dir.path());
    assert_eq!(missing.status.code(), Some(4));

    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "schema_version = 1\nunknown_key = 3\n").unwrap();
    let invalid = run(&["mpc", bad.to_str().unwrap()], dir.path());
    assert_eq!(invalid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("unknown_key"));

    let sc = scenario("two_bus.scn");
    let negative = run(&["mpc", sc.to_str().unwrap(), "--ts=-0.01"], dir.path());
    assert_eq!(negative.status.code(), Some(2));
}

#[test]
fn dmpc_without_areas_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("two_bus.scn")).unwrap();
    let start = text.find("[distributed]").expect("shipped scenario has areas");
    let rest = &text[start + 1..];
    let end = rest.find("\n[").map(|i| start + 1 + i + 1).unwrap_or(text.len());
    let stripped = format!("{}{}", &text[..start], &text[end..]);
    let path = dir.path().join("no_areas.scn");
    std::fs::write(&path, stripped).unwrap();
    let out = run(&["dmpc", path.to_str().unwrap(), "--ttotal", "0.02"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
