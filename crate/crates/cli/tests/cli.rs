use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn isoext(dir: &Path, config: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_isoext"));
    cmd.arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let p = dir.join("run.toml");
        fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(p);
    }
    cmd.args(args).output().expect("spawn isoext")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let k = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

/// Small exact conformal-arc start: cheap and inside the inductive conditions.
const ARC_START: &str = r#"
[grid]
half_width = 0.1
depth = 0.25
resolution = [161, 201]

[iteration]
start = "conformal-arc"
"#;

#[test]
fn corrugation_table_has_configured_shape_and_exact_identity() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), None, &["demo-corrugation"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(t.path(), "corrugation.csv");
    assert_eq!(csv.lines().next().unwrap(), "s,t,gamma1,gamma2,residual");
    assert_eq!(csv.lines().count() - 1, 64 * 256);
    let s = column(&csv, "s");
    assert_eq!(s.iter().copied().fold(f64::MIN, f64::max), 1.0);
    let worst = column(&csv, "residual").into_iter().fold(0.0, f64::max);
    assert!(worst < 1e-9, "residual {worst}");
}

#[test]
fn arc_extension_succeeds_with_exact_trace_and_strict_iterate_stalls() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), None, &["--no-meshes", "extend"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read(t.path(), "extension.txt");
    assert!(report.contains("boundary_trace = 0.00000000000000000e0"), "{report}");
    assert!(t.path().join("out/state/manifest.toml").exists());

    // The extension's |G| is far above r2, so strict escalation runs out.
    let o = isoext(t.path(), None, &["--no-meshes", "iterate", "--q-max", "1"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("escalation exhausted"));
}

#[test]
fn straight_line_exits_with_margin_report() {
    let t = TempDir::new().unwrap();
    let cfg = "[boundary]\npreset = \"line\"\n[grid]\nresolution = [41, 41]\n";
    let o = isoext(t.path(), Some(cfg), &["extend"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("margin 0e0"), "{}", stderr(&o));
    let rep = read(t.path(), "margin.txt");
    assert!(rep.contains("margin = 0.00000000000000000e0"), "{rep}");
    assert!(rep.contains("admissible = false"));
}

fn boundary_file(dir: &Path, header: &str, bad_row: Option<(usize, &str)>) -> String {
    let mut s = format!("{header}\n");
    let n = 41;
    for j in 0..n {
        let x = -0.06 + 0.12 * j as f64 / (n - 1) as f64;
        let row = match bad_row {
            Some((k, text)) if k == j => text.to_string(),
            _ => format!("{x},{},{},0,{},{},0", x.cos(), x.sin(), -x.cos(), -x.sin()),
        };
        s.push_str(&row);
        s.push('\n');
    }
    let p = dir.join("boundary.csv");
    fs::write(&p, s).unwrap();
    format!("[boundary]\npreset = \"file\"\nfile = \"{}\"\n[grid]\nresolution = [41, 41]\n", p.display())
}

#[test]
fn malformed_boundary_file_names_the_field() {
    let t = TempDir::new().unwrap();
    let cfg = boundary_file(t.path(), "x1,f1,f2,f3,mu1,mu2", None);
    let o = isoext(t.path(), Some(&cfg), &["extend"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing column `mu3`"), "{}", stderr(&o));

    let cfg = boundary_file(t.path(), "x1,f1,f2,f3,mu1,mu2,mu3", Some((3, "-0.051,1,oops,0,-1,0,0")));
    let o = isoext(t.path(), Some(&cfg), &["extend"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("field `f2`"), "{}", stderr(&o));
}

#[test]
fn boundary_file_matching_the_arc_passes_the_margin_check() {
    let t = TempDir::new().unwrap();
    let cfg = boundary_file(t.path(), "x1,f1,f2,f3,mu1,mu2,mu3", None);
    let o = isoext(t.path(), Some(&cfg), &["decompose"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = read(t.path(), "margin.txt");
    let margin: f64 = rep.lines().next().unwrap().trim_start_matches("margin = ").parse().unwrap();
    assert!((margin - 1.0).abs() < 1e-3, "{margin}");
}

#[test]
fn invalid_config_is_a_validation_error() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), Some("[schedule]\na = 0.6\n"), &["demo-corrugation"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schedule.a"));
    let o = isoext(t.path(), Some("[schedule]\nbogus = 1\n"), &["demo-corrugation"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let o = isoext(t.path(), None, &["iterate", "--big-a", "1.0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_tolerance_runs_exactly_q_max_iterates() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), Some(ARC_START), &["iterate", "--tol", "0", "--q-max", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(t.path(), "iterations.csv");
    assert_eq!(csv.lines().count() - 1, 2);
    assert!(read(t.path(), "summary.txt").contains("stop = \"MaxIterates\""));
    for q in 0..=2 {
        assert!(t.path().join(format!("out/iterate_{q:03}.obj")).exists());
    }
    assert!(t.path().join("out/final/manifest.toml").exists());
}

#[test]
fn alpha_above_ceiling_warns() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), Some(ARC_START), &["--no-meshes", "iterate", "--tol", "0", "--q-max", "1", "--alpha", "0.12"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("summability of the increments is not expected"), "{}", stderr(&o));
    let o = isoext(t.path(), Some(ARC_START), &["--no-meshes", "iterate", "--tol", "0", "--q-max", "1", "--alpha", "0.1"]);
    assert!(!stderr(&o).contains("summability"));
}

#[test]
fn identical_runs_write_identical_csv() {
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for t in &runs {
        for args in [&["demo-corrugation"][..], &["step-demo"], &["iterate", "--tol", "0", "--q-max", "2"]] {
            let o = isoext(t.path(), Some(ARC_START), args);
            assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        }
    }
    for name in ["corrugation.csv", "step.csv", "iterations.csv", "summary.txt", "step.obj"] {
        let a = fs::read(runs[0].path().join("out").join(name)).unwrap();
        let b = fs::read(runs[1].path().join("out").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn iterate_without_bundle_is_a_validation_error() {
    let t = TempDir::new().unwrap();
    let o = isoext(t.path(), None, &["iterate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no state bundle"));
}
