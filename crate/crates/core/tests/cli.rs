use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join(format!("{sub}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("out-{sub}-{}", extra.join("_").replace(['-', '/'], "")));
    let output = Command::new(env!("CARGO_BIN_EXE_nleval"))
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    (output, out)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const ZERO_BT: &str = "seed = 1\n[tree]\nsteps = 32\n[terminal]\nkind = \"brownian\"\n";

const CAPPED: &str = r#"
seed = 11
[tree]
steps = 32
[generator]
kind = "mu_phi"
mu = 0.3
[generator.modulus]
kind = "capped_sqrt"
"#;

#[test]
fn solve_zero_generator_reproduces_brownian_terminal() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "solve", ZERO_BT, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("solution.csv")).unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let b: f64 = rec[2].parse().unwrap();
        let y: f64 = rec[3].parse().unwrap();
        assert!((b - y).abs() < 1e-13);
        rows += 1;
    }
    assert_eq!(rows, 33 * 34 / 2);
    let summary = json(&out.join("solve.json"));
    assert_eq!(summary["engine"], "nleval");
    assert_eq!(summary["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    for (i, bad) in ["[tree]\nsteps = 0\n", "[tree]\nsteps = 8\nwidth = 3\n", "[tree\n"]
        .iter()
        .enumerate()
    {
        let (o, _) = run(dir.path(), "solve", bad, &["--seed", &i.to_string()]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_nleval"))
        .arg("solve")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_nleval"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn large_mu_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = "[tree]\nsteps = 4\n[generator]\nkind = \"mu_phi\"\nmu = 8.0\n[generator.modulus]\nkind = \"zero\"\n";
    let (o, _) = run(dir.path(), "solve", cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu"));
}

#[test]
fn properties_pass_and_planted_failure() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "properties", CAPPED, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out.join("properties.json"))["passed"], true);

    let planted = CAPPED.replace("mu = 0.3", "mu = 0.3\noffset = 1.0");
    let (o, out) = run(dir.path(), "properties", &planted, &["--seed", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let failing = json(&out.join("properties.json"))["result"]["failing"].to_string();
    assert!(failing.contains("zero_preserving"), "{failing}");
    assert!(failing.contains("zero_one_law_strict"), "{failing}");
}

#[test]
fn convergence_errors_decrease() {
    let dir = TempDir::new().unwrap();
    let cfg = format!(
        "[tree]\nsteps = 32\n[generator]\nkind = \"linear\"\na = 0.5\nb = 0.0\nc = 0.0\n[terminal]\nkind = \"constant\"\nvalue = 1.0\n[convergence]\nsteps = [32, 64, 128]\nreference = {}\n",
        0.5f64.exp()
    );
    let (o, out) = run(dir.path(), "convergence", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = json(&out.join("convergence.json"))["result"]["rows"].clone();
    let errs: Vec<f64> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["error"].as_f64().unwrap())
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");

    // reference from an 8x finer run
    let cfg = "[tree]\nsteps = 16\n[generator]\nkind = \"mu_phi\"\nmu = 0.5\n[generator.modulus]\nkind = \"identity\"\n[terminal]\nkind = \"call\"\nstrike = 0.0\n[convergence]\nsteps = [16, 32, 64]\n";
    let (o, out) = run(dir.path(), "convergence", cfg, &["--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out.join("convergence.json"))["result"]["reference_steps"], 512);
}

#[test]
fn dm_and_fixedpoint_runs() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "dm", "[tree]\nsteps = 64\n", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let levels = fs::read_to_string(out.join("dm_levels.csv")).unwrap();
    assert!(levels.starts_with("n,residual,z_energy,a_square,monotonicity_slack"));

    let cfg = format!("{CAPPED}[fixedpoint]\nlambda = 1.0\nf = \"sin\"\n");
    let (o, out) = run(dir.path(), "fixedpoint", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("picard.csv")).unwrap().lines().count() > 1);
    assert!(
        json(&out.join("fixedpoint.json"))["result"]["trace"]["partition"]
            .as_array()
            .unwrap()
            .len()
            > 2
    );
}

const RECOVER: &str = r#"
seed = 5
[tree]
steps = 64
[generator]
kind = "mu_phi"
mu = 0.3
[generator.modulus]
kind = "capped_sqrt"
[declared]
mu = 0.5
[declared.modulus]
kind = "scaled"
c = 1.5
[recover]
level = 2
verify_trials = 10
y = { lo = -2.0, hi = 2.0, count = 3 }
z = { lo = -2.0, hi = 2.0, count = 3 }
"#;

#[test]
fn recover_run_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (o, a) = run(dir.path(), "recover", RECOVER, &["--threads", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&a.join("recover.json"));
    assert_eq!(report["result"]["error_decreasing"], true);
    let (o, b) = run(dir.path(), "recover", RECOVER, &[]);
    assert_eq!(o.status.code(), Some(0));
    for name in [
        "recover.json",
        "recover_errors.csv",
        "recovered_64.csv",
        "recovered_128.csv",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn seed_override_changes_hash_only_through_config() {
    let dir = TempDir::new().unwrap();
    let (_, a) = run(dir.path(), "solve", ZERO_BT, &[]);
    let (_, b) = run(dir.path(), "solve", ZERO_BT, &["--seed", "9"]);
    let (ja, jb) = (json(&a.join("solve.json")), json(&b.join("solve.json")));
    assert_ne!(ja["config_hash"], jb["config_hash"]);
    assert_eq!(jb["seed"], 9);
    assert_eq!(
        fs::read(a.join("solution.csv")).unwrap(),
        fs::read(b.join("solution.csv")).unwrap()
    );
}
