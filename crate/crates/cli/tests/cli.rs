use std::path::Path;
use std::process::{Command, Output};

use sadamp_core::ann::MlpModel;
use sadamp_core::config::ProjectConfig;
use sadamp_core::persist::load_dataset;
use sadamp_core::simtime::WaveRecord;
use sadamp_core::stability::parse_trajectory_csv;

fn sadamp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sadamp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn analyze_reports_unstable_case_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(dir.path(), &["analyze", "--l-g", "4e-3", "--r-g", "0.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict = unstable"));
    let traj = std::fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert!(parse_trajectory_csv(&traj).unwrap().len() > 100);
    assert!(dir.path().join("out/reports.log").exists());
}

#[test]
fn tune_prints_design_meeting_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(dir.path(), &["tune", "--sigma-thd", "0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(value(&out, "margin") >= 0.1);
    assert!(value(&out, "h_v") > 0.0);
    assert!(value(&out, "omega_c_radps") > 0.0);
}

#[test]
fn infeasible_tuning_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(dir.path(), &["tune", "--sigma-thd", "20"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn missing_grid_section_exits_two_with_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[system]\n[analysis]\nsigma_thd = 0.1\n").unwrap();
    let o = sadamp(dir.path(), &["--config", "bad.toml", "analyze"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("grid"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_key_and_bad_flag_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[system.grid]\nr_g = 0.2\nl_g = 4e-3\nlg = 1.0\n",
    )
    .unwrap();
    let o = sadamp(dir.path(), &["--config", "c.toml", "analyze"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lg"));
    let o = sadamp(dir.path(), &["analyze", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn init_template_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(dir.path(), &["init", "cfg.toml"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = ProjectConfig::load(&dir.path().join("cfg.toml")).unwrap();
    assert_eq!(cfg, ProjectConfig::case(0.2, 4e-3).unwrap());
    let o = sadamp(dir.path(), &["--config", "cfg.toml", "--power", "0.3", "analyze"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("verdict = stable"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(
        dir.path(),
        &["sweep", "--axis", "impedance", "--from", "1e-3", "--to", "5e-3", "--steps", "5"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let margins: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(margins.len(), 5);
    assert!(margins.windows(2).all(|w| w[1] <= w[0]), "{margins:?}");
}

#[test]
fn admittance_dataset_train_and_model_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sadamp(
        d,
        &["dataset", "--kind", "admittance", "--freq-min", "10", "--freq-max", "1000", "--freq-points", "4"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ds = load_dataset(&d.join("out/admittance_dataset.csv"), 5).unwrap();
    assert_eq!(ds.len(), 15 * 4);
    let o = sadamp(d, &["train", "--kind", "admittance", "--config-hyper", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("out/admittance_model.txt")).unwrap();
    let m = MlpModel::from_text(&text).unwrap();
    assert_eq!((m.n_in, m.n_out), (5, 8));

    let future = text.replacen("sadamp-mlp 1 ", "sadamp-mlp 99 ", 1);
    std::fs::write(d.join("future.txt"), future).unwrap();
    let o = sadamp(d, &["adapt", "--model", "future.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_reparseable_waveforms() {
    let dir = tempfile::tempdir().unwrap();
    let o = sadamp(dir.path(), &["--power", "0.5", "simulate", "--duration", "0.3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict = Stable"), "{}", stdout(&o));
    let text = std::fs::read_to_string(dir.path().join("out/waveforms.csv")).unwrap();
    let w = WaveRecord::from_csv(&text).unwrap();
    assert!(w.channel("igd_A").is_some());
    assert!(w.len() > 1000);
}
