use std::path::Path;
use std::process::Command;

use wiener_density::experiment::{
    emit_outputs, read_density_csv, run_experiment, ExperimentConfig, ExperimentReport, GridSpec, ModelParams, Preset,
};

fn wdensity() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wdensity"))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn small(preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset, 200, 31);
    cfg.grid_points = 17;
    cfg.mehler.n_copies = 8;
    cfg.mehler.laguerre_nodes = 8;
    cfg.nested.n_sub = 16;
    cfg.centering_paths = Some(1000);
    cfg.x_grid = GridSpec::Auto { points: 51 };
    cfg
}

#[test]
fn empty_report_gives_header_only_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let paths = emit_outputs(&ExperimentReport::empty(), tmp.path()).unwrap();
    assert_eq!(std::fs::read_to_string(&paths.density_csv).unwrap(), "x,lower_env,upper_env\n");
    assert_eq!(
        std::fs::read_to_string(&paths.violations_csv).unwrap(),
        "method,side,index,x,density,bound\n"
    );
    assert_eq!(std::fs::read_to_string(&paths.check_csv).unwrap(), "method,x,density,lower,upper\n");
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.diagnostics_json).unwrap()).unwrap();
    assert_eq!(diag["status"]["exit_code"], 0);
}

#[test]
fn density_csv_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(Preset::AdditiveExp)).unwrap();
    let paths = emit_outputs(&report, tmp.path()).unwrap();
    let (header, rows) = read_density_csv(&paths.density_csv).unwrap();
    let mut expected = vec!["x".to_string()];
    expected.extend(report.densities.iter().map(|d| d.method.as_str().to_string()));
    expected.extend(["lower_env".to_string(), "upper_env".to_string()]);
    assert_eq!(header, expected);
    assert_eq!(rows.len(), report.x_grid.len());
    let lower = report.lower_env.as_ref().expect("certificate issued");
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], Some(report.x_grid[i]));
        for (k, d) in report.densities.iter().enumerate() {
            assert_eq!(row[k + 1], Some(d.values[i]));
        }
        assert_eq!(row[report.densities.len() + 1], Some(lower[i]));
        // convex branch: no upper envelope
        assert_eq!(row[report.densities.len() + 2], None);
    }
}

#[test]
fn run_subcommand_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &small(Preset::AdditiveLinear));
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("out{k}"));
        let status = wdensity()
            .args(["run", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env("WDENSITY_THREADS", threads)
            .output()
            .unwrap()
            .status;
        assert_eq!(status.code(), Some(0));
        let files: Vec<Vec<u8>> = ["density.csv", "diagnostics.json", "violations.csv", "envelope_check.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);

    // a different seed changes the numbers
    let out = tmp.path().join("reseeded");
    let status = wdensity()
        .args(["run", "--seed", "99", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert_ne!(std::fs::read(out.join("density.csv")).unwrap(), outputs[0][0]);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["config"]["seed"], 99);
}

#[test]
fn asserted_floor_above_the_truth_is_a_hypothesis_breach() {
    // f(x) = x + e^x has f' > 1 but nowhere near 5
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Preset::AdditiveExp);
    cfg.params = ModelParams {
        c: Some(5.0),
        ..Default::default()
    };
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    let status = wdensity()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(3));
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["certificate_issued"], false);
    let audits = diag["audits"].as_array().unwrap();
    let fprime = audits.iter().find(|a| a["id"] == "fprime-floor").unwrap();
    assert!(fprime["violations"].as_u64().unwrap() > 0);
    // no certificate, so no envelope columns
    let (_, rows) = read_density_csv(&out.join("density.csv")).unwrap();
    assert!(rows.iter().all(|r| r[r.len() - 2].is_none()));
}

#[test]
fn sde_sigma_floor_breach_aborts_with_model_violation() {
    // sigma = 2 + sin x >= 1, so an asserted c = 1.5 is breached on evaluation
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Preset::SdeSine);
    cfg.n_paths = 20;
    cfg.params = ModelParams {
        c: Some(1.5),
        x0: Some(-1.5),
        ..Default::default()
    };
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    let output = wdensity()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["error"], "model-violation");
}

#[test]
fn config_errors_exit_with_code_5() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{"schema_version": 1, "preset": "linear", "n_paths": 0, "seed": 1}"#).unwrap();
    let status = wdensity()
        .args(["run", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(5));
    let missing = wdensity()
        .args(["run", "--config", "/nonexistent/config.json", "--out"])
        .arg(tmp.path().join("out2"))
        .output()
        .unwrap()
        .status;
    assert_eq!(missing.code(), Some(1));
}

#[test]
fn auxiliary_subcommands() {
    let out = wdensity().arg("presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for p in Preset::ALL {
        assert!(text.contains(p.name()));
    }
    let out = wdensity().args(["validate-kernel", "--cells", "128"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().filter(|l| l.starts_with("0.")).count(), 6);
    let out = wdensity().args(["gaussian-sanity", "--n-paths", "20000"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 6);
}
