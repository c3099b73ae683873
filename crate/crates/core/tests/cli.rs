use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(sub: &str, config: &str, dir: &Path, seed: u64) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_delay-control"))
        .args([sub, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(["--seed", &seed.to_string()])
        .output()
        .unwrap()
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn empty_config_exits_with_parse_error() {
    let dir = TempDir::new().unwrap();
    let out = run("solve", "# nothing here\n", dir.path(), 0);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error_code="));
    assert!(err.contains(" detail="));
}

#[test]
fn unknown_key_and_family_are_rejected() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run("solve", "family = pure_delay\nbogus = 1\n", dir.path(), 0).status.code(), Some(2));
    assert_ne!(run("solve", "family = nope\n", dir.path(), 0).status.code(), Some(0));
}

#[test]
fn missing_config_file_is_io_error() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_delay-control"))
        .args(["value", "--config"])
        .arg(dir.path().join("absent.cfg"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn solve_pure_delay_matches_method_of_steps() {
    let dir = TempDir::new().unwrap();
    let cfg = "family = pure_delay\nb = 1\nT = 2\ncells = 64\ncontrol_step = 0.5\nx = const:1\n";
    let out = run("solve", cfg, dir.path(), 0);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = rows(&dir.path().join("out/trajectory.csv"));
    assert_eq!(data.len(), 129);
    for r in data {
        let s = r[0];
        let exact = if s <= 1.0 { 1.0 + s } else { 1.0 + s + (s - 1.0).powi(2) / 2.0 };
        assert!((r[1] - exact).abs() <= 2.0 / 64.0, "s={s}");
    }
}

#[test]
fn dpp_check_on_quadratic_example() {
    let dir = TempDir::new().unwrap();
    let cfg = "family = memoryless_affine_quadratic\nT = 1\ncells = 4\ncontrol_step = 0.25\nwx = 1\nwu = 0.5\nx = linear:0.5;-0.5\n";
    let out = run("dpp-check", cfg, dir.path(), 0);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = rows(&dir.path().join("out/dpp.csv"));
    assert_eq!(data.len(), 5);
    assert!(data.iter().all(|r| r[3].abs() <= 1e-12));
}

#[test]
fn value_on_classical_benchmark() {
    let dir = TempDir::new().unwrap();
    let cfg = "family = memoryless_affine\nc1 = 0\nc2 = 1\ncontrols = -1;1\nT = 1\ncells = 8\ncontrol_step = 0.25\nx = const:0.3\nt = 0.25\n";
    let out = run("value", cfg, dir.path(), 0);
    assert!(out.status.success());
    let data = rows(&dir.path().join("out/value.csv"));
    assert!((data[0][2] - (0.3 - 0.75)).abs() < 1e-12);
    assert!(data[0][3].abs() < 1e-12);
}

#[test]
fn hjb_and_compare_write_expected_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = "family = memoryless_affine\nc1 = 0\nc2 = 1\ncontrols = -1;1\nT = 1\ncells = 8\ncontrol_step = 0.25\ntf_t = 1\nalpha = 1;10\n";
    assert!(run("hjb-residual", cfg, dir.path(), 0).status.success());
    let hjb = fs::read_to_string(dir.path().join("out/hjb.csv")).unwrap();
    assert!(hjb.starts_with("t,x0,residual,hamiltonian_minimizer\n"));
    assert_eq!(hjb.lines().count(), 9);
    for r in rows(&dir.path().join("out/hjb.csv")) {
        assert!(r[2].abs() < 1e-12);
    }
    assert!(run("compare-harness", cfg, dir.path(), 0).status.success());
    let cmp = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    assert!(cmp.starts_with("alpha,half_alpha_d,alpha_b_gap_sq,t_hat,s_hat,x0_hat,y0_hat,interior_flag\n"));
    assert_eq!(cmp.lines().count(), 3);
}

#[test]
fn outputs_are_deterministic_given_seed() {
    let cfg = "family = memory_scalar\nT = 1\ncells = 16\ncontrol_step = 0.25\nx = random:1\nmethod = picard\ncontrol = 0;1;2;1\n";
    let read = |seed| {
        let dir = TempDir::new().unwrap();
        assert!(run("solve", cfg, dir.path(), seed).status.success());
        fs::read(dir.path().join("out/trajectory.csv")).unwrap()
    };
    assert_eq!(read(7), read(7));
    assert_ne!(read(7), read(8));
}

#[test]
fn budget_overflow_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg = "family = pure_delay\nT = 2\ncells = 8\ncontrol_step = 0.25\nbudget = 10\n";
    let out = run("value", cfg, dir.path(), 0);
    assert_eq!(out.status.code(), Some(7));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error_code="));
}
