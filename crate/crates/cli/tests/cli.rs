use std::path::Path;
use std::process::{Command, Output};

use prism_core::data::write_csv_to;
use prism_core::graph::import_adjacency;
use prism_core::stability::{build_horizon_map, certify_contraction, StabilityReport};
use prism_core::synthetic::{generate_with, SyntheticKind, SyntheticOptions};
use tempfile::TempDir;

const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "denoise",
    "graph",
    "train",
    "infer",
    "eval",
    "stability",
    "spectrum",
    "ablate",
];

const TINY_CONFIG: &str = r#"{
  "model": { "context": 8, "horizon": 3, "d_model": 8, "graph_widths": [8], "dec_widths": [8] },
  "max_epochs": 1,
  "window_stride": 4,
  "denoiser": { "steps": 10, "hidden": 8 }
}"#;

fn prism(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run prism")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = prism(dir, args);
    assert!(
        out.status.success(),
        "prism {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workspace(len: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--channels", "4", "--len", len, "--out", "d.csv"],
    );
    std::fs::write(dir.path().join("c.json"), TINY_CONFIG).unwrap();
    dir
}

#[test]
fn synth_matches_library_bytes() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--kind",
            "shifted_pairs",
            "--channels",
            "4",
            "--len",
            "250",
            "--seed",
            "3",
            "--out",
            "s.csv",
        ],
    );
    let ds = generate_with(SyntheticKind::ShiftedPairs, 4, 250, 3, &SyntheticOptions::default()).unwrap();
    let mut want = Vec::new();
    write_csv_to(&mut want, &ds.values, Some(&ds.channel_names)).unwrap();
    assert_eq!(std::fs::read(dir.path().join("s.csv")).unwrap(), want);
}

#[test]
fn stability_of_built_graph_is_within_one_minus_gamma() {
    let dir = workspace("300");
    ok(dir.path(), &["graph", "--data", "d.csv", "--out", "g.json"]);
    let out = ok(
        dir.path(),
        &[
            "stability",
            "--adjacency",
            "g.json",
            "--kappa",
            "0.3",
            "--gamma",
            "0.2",
            "--out",
            "s.json",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("rho(M)"));
    let report: StabilityReport = serde_json::from_slice(&std::fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert!(report.rho_m <= 0.8 + 1e-12, "rho_m = {}", report.rho_m);
    assert!(report.contractive && report.hypotheses_hold);

    let g = import_adjacency(dir.path().join("g.json")).unwrap();
    let direct = certify_contraction(&build_horizon_map(&g.normalized, 0.3, 0.2).unwrap()).unwrap();
    assert_eq!(report, direct);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = workspace("200");
    for name in ["a.ckpt", "b.ckpt"] {
        ok(
            dir.path(),
            &[
                "train",
                "--config",
                "c.json",
                "--data",
                "d.csv",
                "--seed",
                "7",
                "--out",
                name,
                "--log",
                "log.jsonl",
            ],
        );
    }
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b.ckpt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);

    ok(
        dir.path(),
        &[
            "train", "--config", "c.json", "--data", "d.csv", "--seed", "8", "--out", "c.ckpt",
        ],
    );
    assert_ne!(std::fs::read(dir.path().join("c.ckpt")).unwrap(), a);
}

#[test]
fn trained_checkpoint_drives_infer_eval_and_denoise() {
    let dir = workspace("200");
    ok(
        dir.path(),
        &["train", "--config", "c.json", "--data", "d.csv", "--out", "m.ckpt"],
    );
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() > 1);

    ok(
        dir.path(),
        &["infer", "--checkpoint", "m.ckpt", "--data", "d.csv", "--out", "f.csv"],
    );
    let forecast = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(forecast.lines().count(), 1 + 3);

    ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "d.csv",
            "--out",
            "e.json",
            "--stitched",
            "st.csv",
        ],
    );
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("e.json")).unwrap()).unwrap();
    assert!(eval["model"]["mse"].as_f64().unwrap() >= 0.0);
    assert!(eval["windows"].as_u64().unwrap() > 0);
    let stitched = std::fs::read_to_string(dir.path().join("st.csv")).unwrap();
    assert_eq!(stitched.lines().count(), 1 + 3);

    ok(
        dir.path(),
        &[
            "denoise",
            "--data",
            "d.csv",
            "--checkpoint",
            "m.ckpt",
            "--out",
            "clean.csv",
        ],
    );
    ok(
        dir.path(),
        &[
            "spectrum",
            "--truth",
            "d.csv",
            "--pred",
            "clean.csv",
            "--out",
            "sp.csv",
            "--report",
            "r.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 4);
    let spectra = std::fs::read_to_string(dir.path().join("sp.csv")).unwrap();
    assert_eq!(spectra.lines().next(), Some("channel,series,freq,magnitude"));
    assert_eq!(spectra.lines().count(), 1 + 4 * 2 * (200 / 2 + 1));
}

#[test]
fn ablation_table_has_six_rows_and_neutral_full() {
    let dir = workspace("200");
    ok(
        dir.path(),
        &["ablate", "--config", "c.json", "--data", "d.csv", "--out", "t.csv"],
    );
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    assert_eq!(&rows[0][col("variant")], "full");
    assert_eq!(rows[0][col("delta_mse_pct")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[0][col("delta_mae_pct")].parse::<f64>().unwrap(), 0.0);
    let names: Vec<&str> = rows.iter().map(|r| &r[col("variant")]).collect();
    assert_eq!(
        names,
        [
            "full",
            "no_denoise",
            "static_graph",
            "no_pde",
            "no_constraints",
            "no_lag_cohere"
        ]
    );
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in SUBCOMMANDS {
        let out = prism(dir.path(), &[cmd, "--no-such-flag"]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    }
    assert_eq!(prism(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = workspace("200");
    std::fs::write(dir.path().join("bad.json"), r#"{ "model": { "contxt": 8 } }"#).unwrap();
    let out = prism(dir.path(), &["train", "--config", "bad.json", "--data", "d.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.contxt"));
}

#[test]
fn flags_override_config_file() {
    let dir = workspace("200");
    ok(
        dir.path(),
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "d.csv",
            "--horizon",
            "4",
            "--out",
            "m.ckpt",
        ],
    );
    ok(
        dir.path(),
        &["infer", "--checkpoint", "m.ckpt", "--data", "d.csv", "--out", "f.csv"],
    );
    let forecast = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(forecast.lines().count(), 1 + 4);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = workspace("200");
    let missing = prism(dir.path(), &["train", "--data", "absent.csv"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&missing.stderr).trim().contains('\n'));

    let bad_value = prism(
        dir.path(),
        &["train", "--config", "c.json", "--data", "d.csv", "--lr=-1"],
    );
    assert_eq!(bad_value.status.code(), Some(2));

    let diverged = prism(
        dir.path(),
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "d.csv",
            "--lr",
            "1e300",
            "--no-denoise",
        ],
    );
    assert_eq!(diverged.status.code(), Some(4));

    std::fs::write(dir.path().join("ragged.csv"), "a,b\n1,2\n3\n").unwrap();
    assert_eq!(
        prism(dir.path(), &["graph", "--data", "ragged.csv"]).status.code(),
        Some(3)
    );
}

#[test]
fn help_lists_every_flag_with_a_default() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in SUBCOMMANDS {
        let out = ok(dir.path(), &[cmd, "--help"]);
        let help = String::from_utf8(out.stdout).unwrap();
        let mut entries: Vec<String> = Vec::new();
        for line in help
            .lines()
            .skip_while(|l| !l.starts_with("Options:"))
            .skip(1)
            .map(str::trim)
        {
            if line.starts_with('-') {
                entries.push(line.to_string());
            } else if let Some(last) = entries.last_mut() {
                last.push(' ');
                last.push_str(line);
            }
        }
        assert!(entries.len() > 2, "{cmd}");
        for entry in entries.iter().filter(|e| !e.contains("--help")) {
            assert!(
                entry.contains("[default") || entry.contains("[required]"),
                "{cmd}: {entry}"
            );
        }
    }
}
