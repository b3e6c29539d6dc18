use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use macd_cli::config::{resolve, Layer};
use macd_cli::CliError;
use serde_json::Value;

fn macd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macd")).args(args).env_remove("MACD_SEED").output().unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn gen_suite(dir: &Path, n: &str) {
    let out = macd(&["gen-suite", "--n", n, "--suite-seed", "3", "--out-dir", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_beats_file_beats_default() {
    let file = Layer::from_json(r#"{"decode.alpha": 1.5, "optimizer.eta": 0.05, "jobs": 3}"#).unwrap();
    let mut cli = Layer::default();
    cli.set_text("decode.alpha", "0.5");
    let cfg = resolve(None, Some(&file), &cli).unwrap();
    assert_eq!(cfg.decode.alpha, 0.5);
    assert_eq!(cfg.optimizer.eta, 0.05);
    assert_eq!(cfg.jobs, 3);
    assert_eq!(cfg.decode.beta, 0.0036);
}

#[test]
fn seed_env_replaces_default_seeds_only() {
    let cfg = resolve(Some(9), None, &Layer::default()).unwrap();
    assert_eq!((cfg.decode.seed.0, cfg.suite.seed.0, cfg.bootstrap.seed.0), (9, 9, 9));
    assert_eq!(cfg.backend.to_string(), "toy-biased:9");

    let mut cli = Layer::default();
    cli.set_text("decode.seed", "4");
    let cfg = resolve(Some(9), None, &cli).unwrap();
    assert_eq!((cfg.decode.seed.0, cfg.suite.seed.0), (4, 9));
}

#[test]
fn profile_preset_yields_to_explicit_values() {
    let mut cli = Layer::default();
    cli.set_text("profile", "mvbench");
    let cfg = resolve(None, None, &cli).unwrap();
    assert_eq!((cfg.decode.alpha, cfg.decode.beta), (1.0, 0.5));

    cli.set_text("decode.beta", "0.2");
    let cfg = resolve(None, None, &cli).unwrap();
    assert_eq!((cfg.decode.alpha, cfg.decode.beta), (1.0, 0.2));
}

#[test]
fn unknown_and_invalid_keys_are_config_errors() {
    let mut cli = Layer::default();
    cli.set_text("optimizer.etaa", "0.1");
    assert!(matches!(resolve(None, None, &cli), Err(CliError::Config(_))));

    let mut cli = Layer::default();
    cli.set_text("compose.fusion", "median");
    assert!(matches!(resolve(None, None, &cli), Err(CliError::Config(_))));

    let file = Layer::from_json(r#"{"decode.alpha": -2}"#).unwrap();
    assert!(matches!(resolve(None, Some(&file), &Layer::default()), Err(CliError::Config(_))));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    gen_suite(dir.path(), "2");
    let video = dir.path().join("case_0000.vtns");
    let dets = dir.path().join("case_0000.jsonl");
    let (video, dets) = (video.to_str().unwrap(), dets.to_str().unwrap());

    let code = |args: &[&str]| macd(args).status.code().unwrap();
    assert_eq!(code(&["decode", "--detections", dets, "--query", "1,2"]), 3);
    assert_eq!(code(&["decode", "--video", "/nonexistent.vtns", "--detections", dets, "--query", "1,2"]), 3);
    assert_eq!(code(&["decode", "--video", video, "--detections", dets, "--query", "1,99"]), 3);
    assert_eq!(code(&["decode", "--alpha", "-1", "--video", video, "--detections", dets, "--query", "1,2"]), 2);
    assert_eq!(code(&["decode", "--set", "bogus.key=1", "--video", video, "--detections", dets, "--query", "1,2"]), 2);
    assert_eq!(code(&["decode", "--config", "/nonexistent.json", "--video", video]), 2);
    assert_eq!(code(&["decode", "--no-such-flag"]), 2);
    assert_eq!(
        code(&["decode", "--backend", "proto:127.0.0.1:1", "--video", video, "--detections", dets, "--query", "1,2"]),
        4
    );
    assert_eq!(code(&["decode", "--video", video, "--detections", dets, "--query", "1,2"]), 0);
}

#[test]
fn decode_report_records_passes_and_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_suite(dir.path(), "2");
    let video = dir.path().join("case_0001.vtns");
    let dets = dir.path().join("case_0001.jsonl");
    let report = json_of(&macd(&[
        "decode",
        "--video",
        video.to_str().unwrap(),
        "--detections",
        dets.to_str().unwrap(),
        "--query",
        "1,2",
        "--steps",
        "2",
        "--profile",
        "perception",
    ]));
    assert_eq!(report["schema"], "macd.decode/1");
    assert_eq!(report["config"]["decode"]["alpha"], 1.5);
    let tokens = report["tokens"].as_array().unwrap().len() as u64;
    let rec = &report["record"];
    assert_eq!(rec["base_forwards"].as_u64().unwrap(), tokens);
    assert_eq!(rec["cf_forwards"].as_u64().unwrap(), tokens);
    assert_eq!(rec["grad_passes"], 2);
    assert_eq!(report["provenance"]["strategy"], "macd");
}

#[test]
fn config_file_and_env_seed_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"suite.n": 6, "optimizer.eta": 0.02}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_macd"))
        .args(["eval", "--config", cfg.to_str().unwrap(), "--no-compare"])
        .env("MACD_SEED", "17")
        .output()
        .unwrap();
    let report = json_of(&out);
    assert_eq!(report["suite"]["n"], 6);
    assert_eq!(report["suite"]["seed"], 17);
    assert_eq!(report["config"]["optimizer"]["eta"], 0.02);
    assert_eq!(report["config"]["decode"]["seed"], 17);
    assert_eq!(report["metrics"]["cases"], 6);

    let bad =
        Command::new(env!("CARGO_BIN_EXE_macd")).args(["eval", "--n", "2"]).env("MACD_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn csv_output_has_one_row_per_grid_point() {
    let out = macd(&["grid", "--n", "4", "--alphas", "0,1", "--betas", "0.1", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap().get(0), Some("part"));
    assert_eq!(rdr.records().count(), 3);
}

#[test]
fn suite_dir_matches_generated_suite() {
    let dir = tempfile::tempdir().unwrap();
    gen_suite(dir.path(), "8");
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("suite");
        macd_core::eval::report::strip_wall_clock(&v)
    };
    let from_disk = json_of(&macd(&["eval", "--suite-dir", dir.path().to_str().unwrap(), "--no-compare"]));
    let generated = json_of(&macd(&["eval", "--n", "8", "--suite-seed", "3", "--no-compare"]));
    assert_eq!(strip(from_disk), strip(generated));
}

#[test]
fn stdio_bridge_matches_in_process_backend() {
    let dir = tempfile::tempdir().unwrap();
    gen_suite(dir.path(), "6");
    let bin = env!("CARGO_BIN_EXE_macd");
    let run = |backend: &str| {
        let out = Command::new(bin)
            .args(["eval", "--suite-dir", dir.path().to_str().unwrap(), "--no-compare", "--backend", backend])
            .env("MACD_BRIDGE_CMD", format!("{bin} serve --backend toy-biased:0"))
            .output()
            .unwrap();
        macd_core::eval::report::strip_wall_clock(&json_of(&out))["cases"].clone()
    };
    assert_eq!(run("proto:stdio"), run("toy-biased:0"));
}
