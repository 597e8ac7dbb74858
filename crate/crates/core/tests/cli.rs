use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "detectors = [\"mmse\", \"wl-mb-df\"]\nbranches = 4\nsnr_db = [2.0, 6.0]\n\
packets_per_point = 8\nsymbols_per_packet = 50\nseed = 3\n\n\
[dims]\nusers = 2\nantennas_per_user = 2\nreceive_antennas = 8\n";

fn wlmbdf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wlmbdf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn ber_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONFIG);
    let out = wlmbdf(&["ber", "--config", &cfg], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("detector,snr_db,iteration,trials_bits,bit_errors,ber,ci_halfwidth,seed")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 8 && r[7] == "3"));
    assert_eq!(rows[0][0], "mmse");
    assert_eq!(rows[3][0], "wl-mb-df");
    assert_eq!(rows[3][1], "6");
    let trials: u64 = rows[0][3].parse().unwrap();
    assert_eq!(trials, 8 * 50 * 2 * 4);
}

#[test]
fn seed_override_changes_results_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONFIG);
    let run = |seed: &str| {
        let out = wlmbdf(&["ber", "--config", &cfg, "--seed", seed], dir.path());
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run("17");
    assert_eq!(a, run("17"));
    assert_ne!(a, run("18"));
    assert!(a.lines().skip(1).all(|l| l.ends_with(",17")));
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONFIG);
    let target = dir.path().join("res.csv");
    let out = wlmbdf(
        &["ber", "--config", &cfg, "--out", &target.to_string_lossy()],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(target).unwrap().lines().count(), 5);
}

#[test]
fn unknown_detector_lists_registry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &CONFIG.replace("\"mmse\"", "\"zf\""));
    let out = wlmbdf(&["ber", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("zf"));
    for name in ["rmf", "mmse", "sic", "wl-sic", "las", "mb-df", "wl-mb-df"] {
        assert!(err.contains(name), "{name} missing from {err}");
    }
}

#[test]
fn config_and_io_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = wlmbdf(&["ber", "--config", "does-not-exist.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let cfg = write(dir.path(), "c.toml", &format!("{CONFIG}\nbogus_key = 1\n"));
    assert_eq!(
        wlmbdf(&["ber", "--config", &cfg], dir.path()).status.code(),
        Some(1)
    );
    let coded_las = write(
        dir.path(),
        "l.toml",
        &CONFIG
            .replace("\"mmse\"", "\"las\"")
            .replace("seed = 3", "seed = 3\ncoded = true"),
    );
    assert_eq!(
        wlmbdf(&["ber", "--config", &coded_las], dir.path())
            .status
            .code(),
        Some(1)
    );
    let bad_beta = write(
        dir.path(),
        "b.toml",
        &CONFIG.replace("branches = 4", "branches = 4\nbeta = 1.5"),
    );
    assert_eq!(
        wlmbdf(&["ber", "--config", &bad_beta], dir.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &CONFIG.replace("[2.0, 6.0]", "[-4000.0]"),
    );
    let out = wlmbdf(&["ber", "--config", &cfg], dir.path());
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn validate_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = wlmbdf(&["validate"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn calibrate_beta_reports_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONFIG);
    let out = wlmbdf(&["calibrate-beta", "--config", &cfg], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("beta=")).count(), 5);
    assert!(text.contains("chosen beta for wl-mb-df"));
}
