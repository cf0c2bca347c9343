use std::path::Path;
use std::process::{Command, Output};

use hybridtrap_core::config::{sha256_hex, RunManifest};
use hybridtrap_core::constants::ELEMENTARY_CHARGE;
use hybridtrap_core::inference::{omega_m_for_photon_number, secular_frequency_for_charge};
use hybridtrap_core::presets;

fn run(args: &[&str], dir: &Path) -> Output {
    run_env(args, dir, &[])
}

fn run_env(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hybridtrap"));
    cmd.args(args).current_dir(dir);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SHORT: [&str; 4] = ["--set", "integrator.duration_s=2e-3", "--set", "ensemble_members=2"];

#[test]
fn derive_reports_reference_defaults_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["derive", "-c", "fig3", "--out", "d"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rel = |key: &str, want: f64| (v[key].as_f64().unwrap() / want - 1.0).abs();
    assert!(rel("mass_kg", 8.41e-17) < 0.01);
    assert!(rel("coupling_a_rad_s", 1.85e5) < 0.01);
    assert!(rel("kappa_rad_s", 1.45e6) < 0.01);

    let m = manifest(&tmp.path().join("d"));
    assert_eq!(m.subcommand, "derive");
    assert_eq!(m.config_hash, m.config.hash());
    assert_eq!(m.files.len(), 1);
    let bytes = std::fs::read(tmp.path().join("d").join(&m.files[0].path)).unwrap();
    assert_eq!(sha256_hex(&bytes), m.files[0].sha256);
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "-c", "nope.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn validation_errors_exit_3_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["derive", "-c", "fig2", "--set", "gas.pressure_pa=-1", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gas.pressure_pa"));
    let out = run(&["derive", "-c", "fig2", "--set", "gas.pressure_mbar=1", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let out = run_env(&["derive", "-c", "fig2", "--out", "o"], tmp.path(), &[("HYBRIDTRAP_WORKERS", "zero")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["simulate", "-c", "fig3", "--set", "initial.velocity_m_s=[inf, 0.0, 0.0]", "--out", "o"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_replays_from_manifest_at_any_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "-c", "fig3", "--seed", "17", "--out", "a"];
    args.extend(SHORT);
    let first = run_env(&args, tmp.path(), &[("HYBRIDTRAP_WORKERS", "1")]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let a = manifest(&tmp.path().join("a"));
    assert_eq!(a.seed, 17);
    assert_eq!(a.files.len(), 2);

    let replay = run_env(
        &["simulate", "-c", "a/manifest.json", "--out", "b"],
        tmp.path(),
        &[("HYBRIDTRAP_WORKERS", "3")],
    );
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    let b = manifest(&tmp.path().join("b"));
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.files, b.files);
}

#[test]
fn spectrum_and_spectrogram_write_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["spectrum", "-c", "fig3", "--out", "s", "--gnuplot"];
    args.extend(SHORT);
    let out = run(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["spectrum.csv", "peaks.json", "spectrum.gp", "manifest.json"] {
        assert!(tmp.path().join("s").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("s/spectrum.csv")).unwrap();
    assert!(csv.starts_with("freq_hz,psd\n"));

    let args = [
        "spectrogram",
        "-c",
        "fig3",
        "--out",
        "g",
        "--set",
        "integrator.duration_s=6e-3",
        "--set",
        "ensemble_members=2",
    ];
    let out = run(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gram = std::fs::read_to_string(tmp.path().join("g/spectrogram.csv")).unwrap();
    assert!(gram.starts_with("window_start_s,freq_hz,psd\n"));
}

#[test]
fn pressure_sweep_writes_one_spectrum_and_row_per_decade() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sweep",
            "-c",
            "fig4a",
            "--pressure",
            "1e-2:1e-6:decade",
            "--set",
            "integrator.duration_s=5e-3",
            "--out",
            "w",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("w");
    let spectra = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().into_string().unwrap();
            name.starts_with("spectrum_") && name.ends_with(".csv")
        })
        .count();
    assert_eq!(spectra, 5);
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[1].starts_with("p1e-2mbar,1e-2,"));
    assert!(rows[5].starts_with("p1e-6mbar,1e-6,"));
}

#[test]
fn infer_recovers_charge_from_observation_json() {
    let tmp = tempfile::tempdir().unwrap();
    let config = presets::load("fig4a").unwrap();
    let p = config.derive().unwrap();
    let n = 2.5e9;
    let obs = serde_json::json!({
        "omega_m_rad_s": omega_m_for_photon_number(n, &p),
        "omega_s_rad_s": secular_frequency_for_charge(&p, &config.paul, n, 3.0 * ELEMENTARY_CHARGE),
    });
    std::fs::write(tmp.path().join("obs.json"), obs.to_string()).unwrap();
    let out = run(&["infer", "-c", "fig4a", "--observation", "obs.json", "--out", "i"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["charge_count"], 3);
    assert!((v["result"]["photon_n"].as_f64().unwrap() / n - 1.0).abs() < 1e-9);

    let out = run(&["infer", "-c", "fig4a", "--observation", "missing.json", "--out", "i"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
