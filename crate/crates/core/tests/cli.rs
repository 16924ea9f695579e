use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatelab::cli::{read_schedule, Table};
use gatelab::modes::AxialSpectrum;
use tempfile::TempDir;

const SMALL: &str = "\
ion_count = 7
omega_r_mhz = 0.5
omega_z_mhz = 3.0
scaling_sizes = 7, 19
critical_sizes = 7, 19
gap_ion_count = 7
gap_beta_factors = 1.5, 2, 3
tau_us = 40
segments = 5
pairs = 0-1, 0-4
mu_min_mhz = 2.98
mu_max_mhz = 3.05
mu_points = 8
table_omega_r_mhz = 0.5, 0.6
";

fn gatelab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Runs `command` with `config` into `out`, asserting the exit code.
fn run(dir: &Path, command: &str, config: &Path, out: &str, extra: &[&str], code: i32) -> Output {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    let output = gatelab(&args, dir);
    assert_eq!(
        output.status.code(),
        Some(code),
        "{command}: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut all: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    all.sort();
    all
}

fn check_tables(dir: &Path) {
    for (name, bytes) in files(dir) {
        let text = String::from_utf8(bytes).unwrap();
        if name == "spectrum.tsv" {
            // Eigenvalues followed by an eigenvector block.
            let back = AxialSpectrum::from_table(&text).unwrap();
            assert_eq!(back.to_table(), text);
        } else if name.ends_with(".tsv") {
            let t = Table::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            // Compared as text: unavailable fit values are written as NaN.
            assert_eq!(Table::parse(&t.render()).unwrap().render(), t.render(), "{name} does not round-trip");
        } else {
            assert!(name.ends_with(".json"), "{name}");
            serde_json::from_str::<serde_json::Value>(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn every_command_writes_parseable_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "run.cfg", SMALL);
    for command in ["equilibrium", "scaling", "modes", "optimize"] {
        let out = format!("out-{command}");
        run(dir, command, &config, &out, &[], 0);
        check_tables(&dir.join(&out));
    }
    let optimized = dir.join("out-optimize");
    let table = Table::parse(&fs::read_to_string(optimized.join("table1_wr0.5.tsv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(optimized.join("table1_wr0.6.tsv").exists());

    let schedule = optimized.join("schedule_wr0.5_pair1.tsv");
    let parsed = read_schedule(&fs::read_to_string(&schedule).unwrap()).unwrap();
    assert_eq!(parsed.pair, (0, 1));
    run(dir, "gate", &config, "out-gate", &["--schedule", schedule.to_str().unwrap()], 0);
    check_tables(&dir.join("out-gate"));
    // The gate command reproduces the optimizer's fidelity for its schedule.
    let modes = Table::parse(&fs::read_to_string(dir.join("out-gate/gate_modes.tsv")).unwrap()).unwrap();
    let fidelity: f64 = modes.get_meta("fidelity").unwrap().parse().unwrap();
    let best = table.column("fidelity").unwrap()[0];
    assert!((fidelity - best).abs() < 1e-12, "{fidelity} vs {best}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "run.cfg", SMALL);
    for command in ["equilibrium", "modes", "optimize"] {
        run(dir, command, &config, "a", &[], 0);
        run(dir, command, &config, "b", &[], 0);
        assert_eq!(files(&dir.join("a")), files(&dir.join("b")), "{command}");
    }
}

#[test]
fn cached_crystals_reproduce_cold_runs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "run.cfg", SMALL);
    run(dir, "modes", &config, "cold", &[], 0);
    run(dir, "modes", &config, "fill", &["--cache", "cache"], 0);
    run(dir, "modes", &config, "warm", &["--cache", "cache"], 0);
    // One entry per crystal size, N = 7 and 19.
    let cached: Vec<_> = fs::read_dir(dir.join("cache")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(cached.len(), 2, "{cached:?}");
    assert_eq!(files(&dir.join("cold")), files(&dir.join("fill")));
    assert_eq!(files(&dir.join("cold")), files(&dir.join("warm")));
}

#[test]
fn single_ion_has_one_row() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "one.cfg", "ion_count = 1\n");
    run(dir, "equilibrium", &config, "out", &[], 0);
    let t = Table::parse(&fs::read_to_string(dir.join("out/positions.tsv")).unwrap()).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0][1..3], [0.0, 0.0]);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "bad.cfg", "ion_count = 7\n# comment\nomega_x_mhz = 1\n");
    let out = run(dir, "equilibrium", &config, "out", &[], 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let config = write_config(dir, "neg.cfg", "omega_r_mhz = -1\n");
    run(dir, "equilibrium", &config, "out", &[], 2);
    let config = write_config(dir, "empty.cfg", "scaling_sizes =\n");
    run(dir, "scaling", &config, "out", &[], 2);
    run(dir, "equilibrium", &dir.join("missing.cfg"), "out", &[], 2);
    assert_eq!(gatelab(&["nonsense"], dir).status.code(), Some(2));
    assert!(!dir.join("out").exists());
}

#[test]
fn unstable_spectrum_exits_with_four() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "flat.cfg", "ion_count = 19\nomega_r_mhz = 1\nomega_z_mhz = 1.5\n");
    run(dir, "modes", &config, "out", &[], 4);
    assert!(dir.join("out/spectrum.tsv").exists());
}
