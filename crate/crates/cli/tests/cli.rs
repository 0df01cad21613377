use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 11
[paths]
traces = "traces.pnr"
archive = "out"
[simulate]
alpha_sq = [0.0, 0.5, 1.0, 2.0, 3.0]
trials_per_probe = 400
samples_per_trace = 32
[grid]
points = 300
[em]
n_max = 8
max_iterations = 300
"#;

fn pnrtomo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnrtomo")).args(args).output().expect("binary runs")
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn names(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn simulate_and_run(config: &Path) {
    let c = config.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c])), 0);
    let out = pnrtomo(&["pipeline", "--config", c]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn minimal_trace_file_has_expected_length() {
    let (dir, cfg) = setup(
        "[simulate]\nalpha_sq = [0.5, 2.0]\ntrials_per_probe = 10\nsamples_per_trace = 64\n",
    );
    let out = pnrtomo(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // header + probe table + payload
    let expected = 24 + 2 * 16 + 2 * 10 * 64 * 8;
    assert_eq!(expected, 10296);
    assert_eq!(fs::metadata(dir.path().join("traces.pnr")).unwrap().len(), expected as u64);
    let sidecar: Value = serde_json::from_slice(&fs::read(dir.path().join("traces.pnr.json")).unwrap()).unwrap();
    assert_eq!(sidecar["trials_per_probe"], 10);
}

#[test]
fn int16_payload_halves_sample_bytes() {
    let (dir, cfg) = setup(
        "[simulate]\nalpha_sq = [0.5, 2.0]\ntrials_per_probe = 10\nsamples_per_trace = 64\nsample_format = \"int16\"\n",
    );
    assert_eq!(code(&pnrtomo(&["simulate", "--config", cfg.to_str().unwrap()])), 0);
    assert_eq!(fs::metadata(dir.path().join("traces.pnr")).unwrap().len(), (24 + 32 + 2 * 10 * 64 * 2) as u64);
}

#[test]
fn same_seed_gives_identical_traces() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a.pnr");
    let b = dir.path().join("b.pnr");
    let other = dir.path().join("c.pnr");
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c, "--output", a.to_str().unwrap()])), 0);
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c, "--output", b.to_str().unwrap()])), 0);
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c, "--seed", "12", "--output", other.to_str().unwrap()])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn corrupt_config_writes_nothing() {
    for text in ["[simulate\nalpha_sq = [1.0]", "[simulate]\nalpha_sq = \"many\"", "[simulate]\ntrials = 3"] {
        let (dir, cfg) = setup(text);
        let out = pnrtomo(&["simulate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{text}");
        assert!(!out.stderr.is_empty());
        assert_eq!(names(dir.path()), BTreeSet::from(["run.toml".to_owned()]));
    }
}

#[test]
fn invalid_flag_values_are_config_errors() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--prior", "thermal:1.5"])), 2);
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--stages", "pca,plot"])), 2);
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--calib-sigma", "-1"])), 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_trace_file_is_io_error() {
    let (dir, cfg) = setup(SMALL);
    let out = pnrtomo(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert_eq!(manifest(&dir.path().join("out"))["status"], "FAILED(pca)");
}

#[test]
fn malformed_trace_file_fails_its_stage() {
    let (dir, cfg) = setup(SMALL);
    fs::write(dir.path().join("traces.pnr"), b"PNRTRACX and some bytes").unwrap();
    let out = pnrtomo(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pca"));
    assert_eq!(manifest(&dir.path().join("out"))["status"], "FAILED(pca)");
}

#[test]
fn full_pipeline_archive_and_rerun_guard() {
    let (dir, cfg) = setup(SMALL);
    simulate_and_run(&cfg);
    let out_dir = dir.path().join("out");
    let expected: BTreeSet<String> = [
        "basis.bin",
        "scores.csv",
        "grid.json",
        "densities.csv",
        "model.json",
        "em_log.json",
        "povm_table.csv",
        "marginalized_table.csv",
        "efficiency.json",
        "confidence_flat.csv",
        "confidence_prior.csv",
        "confidence_thermal_sweep.csv",
        "manifest.json",
    ]
    .map(str::to_owned)
    .into();
    assert_eq!(names(&out_dir), expected);

    let m = manifest(&out_dir);
    assert_eq!(m["status"], "OK");
    assert_eq!(m["outputs"].as_object().unwrap().len(), expected.len() - 1);
    assert_eq!(m["timings"].as_object().unwrap().len(), 6);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for (name, hash) in m["outputs"].as_object().unwrap() {
        let bytes = fs::read(out_dir.join(name)).unwrap();
        let digest = sha2_hex(&bytes);
        assert_eq!(hash.as_str().unwrap(), digest, "{name}");
    }

    let eff: Value = serde_json::from_slice(&fs::read(out_dir.join("efficiency.json")).unwrap()).unwrap();
    let eta = eff["eta"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eta));

    let csv = fs::read_to_string(out_dir.join("confidence_flat.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("n [photons],prior [1],confidence [1]"));
    assert_eq!(csv.lines().count(), 1 + 9);

    let c = cfg.to_str().unwrap();
    let before = fs::read(out_dir.join("manifest.json")).unwrap();
    let out = pnrtomo(&["pipeline", "--config", c]);
    assert_eq!(code(&out), 5);
    assert_eq!(fs::read(out_dir.join("manifest.json")).unwrap(), before);
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--force", "--stages", "confidence"])), 0);
    let m = manifest(&out_dir);
    assert!(m["inputs"].as_object().unwrap().contains_key("model.json"));
    assert!(m["inputs"].as_object().unwrap().contains_key("marginalized_table.csv"));
}

fn sha2_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}

#[test]
fn stage_subset_writes_only_its_outputs() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c])), 0);
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--stages", "pca,density"])), 0);
    let out_dir = dir.path().join("out");
    let expected: BTreeSet<String> =
        ["basis.bin", "scores.csv", "grid.json", "densities.csv", "manifest.json"].map(str::to_owned).into();
    assert_eq!(names(&out_dir), expected);

    // later stages pick up the stored densities
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--force", "--stages", "em,efficiency"])), 0);
    assert!(out_dir.join("efficiency.json").exists());
    assert!(!out_dir.join("marginalized_table.csv").exists());
    let m = manifest(&out_dir);
    assert!(m["inputs"].as_object().unwrap().contains_key("densities.csv"));

    // confidence needs the marginalized table, which no run has produced
    let out = pnrtomo(&["pipeline", "--config", c, "--force", "--stages", "confidence"]);
    assert_eq!(code(&out), 3);
    assert_eq!(manifest(&out_dir)["status"], "FAILED(confidence)");
}

#[test]
fn pipeline_is_deterministic() {
    let (dir, cfg) = setup(SMALL);
    simulate_and_run(&cfg);
    let first = manifest(&dir.path().join("out"));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--force", "--threads", "2"])), 0);
    let second = manifest(&dir.path().join("out"));
    assert_eq!(first["outputs"], second["outputs"]);
    assert_eq!(first["inputs"], second["inputs"]);
}

#[test]
fn flags_change_config_hash_and_outputs() {
    let (dir, cfg) = setup(SMALL);
    simulate_and_run(&cfg);
    let base = manifest(&dir.path().join("out"));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["pipeline", "--config", c, "--force", "--prior", "flat"])), 0);
    let flat = manifest(&dir.path().join("out"));
    assert_ne!(base["config_hash"], flat["config_hash"]);
    assert_eq!(base["outputs"]["model.json"], flat["outputs"]["model.json"]);
    assert_eq!(flat["outputs"]["confidence_prior.csv"], flat["outputs"]["confidence_flat.csv"]);
}

/// Full synthetic recovery run through the command line: efficiency within
/// 0.03 of the simulated detector.
#[test]
fn end_to_end_efficiency_report() {
    let (dir, cfg) = setup(
        r#"
seed = 20240601
[simulate]
alpha_sq = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0]
trials_per_probe = 5000
samples_per_trace = 32
efficiency = 0.9
[pca]
components = 2
[grid]
points = 1024
[em]
n_max = 20
"#,
    );
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&pnrtomo(&["simulate", "--config", c])), 0);
    let out = pnrtomo(&["pipeline", "--config", c, "--stages", "pca,density,em,efficiency"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eff: Value = serde_json::from_slice(&fs::read(dir.path().join("results/efficiency.json")).unwrap()).unwrap();
    let eta = eff["eta"].as_f64().unwrap();
    assert!((eta - 0.9).abs() <= 0.03, "eta {eta}");
    let log: Value = serde_json::from_slice(&fs::read(dir.path().join("results/em_log.json")).unwrap()).unwrap();
    assert!(log["reconstruction_error"].as_f64().unwrap() < 0.08);
}
