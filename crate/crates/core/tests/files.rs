use std::path::PathBuf;

use lkik_core::circuit::{compile_circuit, Scheme};
use lkik_core::circuit_file::{BuildOptions, CircuitFile};
use lkik_core::coefficients::taylor_coefficients;
use lkik_core::experiment::{self, ExperimentKind, Progress};
use lkik_core::mitigation::{ideal_value, mitigate};
use lkik_core::presets;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quiet(_: &Progress) {}

fn load(name: &str) -> CircuitFile {
    let text = std::fs::read_to_string(root().join("circuits").join(name)).unwrap();
    CircuitFile::from_json(&text).unwrap()
}

#[test]
fn chain_file_matches_preset() {
    let file = load("chain.json");
    for l in [1, 3] {
        let from_file = file
            .build(&BuildOptions {
                split: Some(l),
                ..Default::default()
            })
            .unwrap();
        let preset = presets::chain_circuit(0.02, l).unwrap();
        let (cf, cp) = (
            compile_circuit(&from_file).unwrap(),
            compile_circuit(&preset).unwrap(),
        );
        let (a, b) = (
            ideal_value(&from_file, &cf).unwrap(),
            ideal_value(&preset, &cp).unwrap(),
        );
        assert!((a - b).abs() < 1e-13, "ideal {a} vs {b}");
        for m in [0, 2] {
            let coeffs = taylor_coefficients(m).unwrap();
            let x = mitigate(&from_file, &coeffs, Scheme::Lkik)
                .unwrap()
                .mitigated;
            let y = mitigate(&preset, &coeffs, Scheme::Lkik).unwrap().mitigated;
            assert!((x - y).abs() < 1e-12, "L={l}, M={m}: {x} vs {y}");
        }
    }
}

#[test]
fn feedforward_file_matches_preset() {
    let file = load("feedforward_chain.json");
    let from_file = file
        .build(&BuildOptions {
            split: Some(2),
            ..Default::default()
        })
        .unwrap();
    let preset = presets::feedforward_chain(0.1, 2).unwrap();
    let coeffs = taylor_coefficients(1).unwrap();
    let x = mitigate(&from_file, &coeffs, Scheme::Lkik).unwrap();
    let y = mitigate(&preset, &coeffs, Scheme::Lkik).unwrap();
    assert!((x.ideal.unwrap() - y.ideal.unwrap()).abs() < 1e-13);
    assert!((x.mitigated - y.mitigated).abs() < 1e-12);
}

#[test]
fn rate_override_rescales_noise() {
    let file = load("chain.json");
    let opts = BuildOptions {
        rate: Some(0.0),
        ..Default::default()
    };
    let circ = file.build(&opts).unwrap();
    let r = mitigate(&circ, &taylor_coefficients(0).unwrap(), Scheme::Lkik).unwrap();
    assert!(r.delta.unwrap().abs() < 1e-13);
}

#[test]
fn shipped_configs_validate() {
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = experiment::validate_config(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.clone().normalize().unwrap().hash(), cfg.hash());
        seen.push(cfg.kind);
    }
    for kind in [
        ExperimentKind::OrderSweep,
        ExperimentKind::LayerSweep,
        ExperimentKind::DynamicDemo,
        ExperimentKind::DriftDemo,
        ExperimentKind::GiVsKik,
        ExperimentKind::CostCompare,
    ] {
        assert!(
            seen.contains(&kind),
            "no shipped config for {}",
            kind.label()
        );
    }
}

#[test]
fn cost_compare_writes_csv_and_manifest() {
    let cfg = experiment::validate_config(&root().join("configs/cost_compare.json")).unwrap();
    let out = experiment::run_experiment(&cfg, &quiet).unwrap();
    let dir = std::env::temp_dir().join(format!("lkik-files-{}", std::process::id()));
    let paths = experiment::write_outputs(&dir, &out).unwrap();
    assert_eq!(paths.len(), 2);
    let csv = std::fs::read_to_string(&paths[0]).unwrap();
    assert!(csv.starts_with("layers,order,method"), "{csv}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"], serde_json::json!(cfg.hash()));
    assert_eq!(
        manifest["rows"].as_u64().unwrap() as usize,
        csv.lines().count() - 1
    );
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gate_insertion_config_runs() {
    let mut cfg = experiment::validate_config(&root().join("configs/gi_vs_kik.json")).unwrap();
    cfg.xi = Some(vec![0.05]);
    let out = experiment::run_experiment(&cfg.normalize().unwrap(), &quiet).unwrap();
    let text = String::from_utf8(out.csv).unwrap();
    assert!(text.contains("gate-insertion") && text.contains("lkik"));
}
