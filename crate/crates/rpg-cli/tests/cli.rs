//! End-to-end tests of the `rpg` binary: command output, file artifacts,
//! and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use rpg_core::model::{tiny_net, Network};
use rpg_core::pack;
use rpg_core::ring::{GenMode, Grouping, RingSizing};

fn rpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn train_zero_epochs_emits_header_and_valid_pack() {
    let dir = tempfile::tempdir().unwrap();
    let pack_path = dir.path().join("model.rpg");
    let metrics_path = dir.path().join("metrics.csv");
    let out = rpg(&[
        "train",
        "--arch",
        "tiny-net",
        "--dataset",
        "synthetic",
        "--synth-train",
        "64",
        "--synth-test",
        "16",
        "--width",
        "2",
        "--ring-size",
        "25%",
        "--epochs",
        "0",
        "--seed",
        "5",
        "--out",
        pack_path.to_str().unwrap(),
        "--metrics",
        metrics_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let metrics = read(&metrics_path);
    assert_eq!(
        metrics.trim(),
        "epoch,train_loss,train_acc,val_acc,lr,backbone_params,total_params",
        "zero epochs must leave an empty metrics body"
    );
    let bytes = std::fs::read(&pack_path).unwrap();
    assert!(pack::unpack(&bytes).is_ok(), "pack must round-trip");
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let pack_path = dir.path().join("model.rpg");
    let metrics_path = dir.path().join("metrics.csv");
    let common = [
        "--dataset",
        "synthetic",
        "--synth-train",
        "128",
        "--synth-test",
        "32",
    ];
    let mut args = vec![
        "train",
        "--arch",
        "tiny-net",
        "--width",
        "2",
        "--ring-size",
        "50%",
        "--epochs",
        "1",
        "--bs",
        "32",
        "--lr",
        "0.05",
        "--milestones",
        "",
        "--seed",
        "9",
        "--out",
        pack_path.to_str().unwrap(),
        "--metrics",
        metrics_path.to_str().unwrap(),
    ];
    args.extend_from_slice(&common);
    let out = rpg(&args);
    assert!(out.status.success(), "{out:?}");

    let metrics = read(&metrics_path);
    let last_row = metrics.lines().last().unwrap().to_string();
    let val_acc: f64 = last_row.split(',').nth(3).unwrap().parse().unwrap();

    let mut args = vec!["eval", "--pack", pack_path.to_str().unwrap()];
    args.extend_from_slice(&common);
    let out = rpg(&args);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let eval_acc: f64 = text
        .trim()
        .strip_prefix("val_acc=")
        .expect("eval prints val_acc=")
        .parse()
        .unwrap();
    assert!((eval_acc - val_acc).abs() < 1e-6, "{eval_acc} vs {val_acc}");
}

#[test]
fn verify_props_csv_contract() {
    let out = rpg(&[
        "verify-props",
        "--m",
        "4,9",
        "--trials",
        "2000",
        "--seed",
        "2",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("m,ensemble,trials,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "2 dims x 2 ensembles");
    for row in rows {
        assert!(row.ends_with("true,true"), "pass flags in: {row}");
    }
}

#[test]
fn sweep_then_fit_powerlaw_round_trip() {
    // An exact power law fed through the fit command gives r2 = 1.
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    std::fs::write(
        &csv,
        "ring_size,backbone_params,total_params,train_loss,train_acc,val_acc\n\
         100%,10000,11000,0.5,0.9,0.640\n\
         50%,5000,6000,0.6,0.8,0.45254834\n\
         25%,2500,3500,0.7,0.7,0.32\n\
         10%,1000,2000,0.8,0.6,0.20238577\n",
    )
    .unwrap();
    let out = rpg(&["fit-powerlaw", "--metrics", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let grab = |key: &str| -> f64 {
        text.split_whitespace()
            .find_map(|tok| tok.strip_prefix(key))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((grab("b=") - 0.5).abs() < 1e-4);
    assert!(grab("r2=") > 0.999999);
}

#[test]
fn sweep_runs_multiple_sizes() {
    let out = rpg(&[
        "sweep",
        "--arch",
        "tiny-net",
        "--dataset",
        "synthetic",
        "--synth-train",
        "64",
        "--synth-test",
        "16",
        "--width",
        "2",
        "--ring-sizes",
        "100%,25%",
        "--epochs",
        "1",
        "--bs",
        "16",
        "--lr",
        "0.05",
        "--milestones",
        "",
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("100%,"));
    assert!(lines[2].starts_with("25%,"));
    // 25% backbone is a quarter of 100%.
    let full: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let quarter: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((quarter / full - 0.25).abs() < 0.01);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = rpg(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_pack_is_format_error() {
    let out = rpg(&[
        "eval",
        "--pack",
        "/nonexistent/model.rpg",
        "--dataset",
        "synthetic",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "single-line diagnostic: {err}");
}

#[test]
fn corrupt_pack_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpg");
    let net: Network<f32> = Network::build(
        tiny_net((3, 32, 32), 10, 2, true),
        Grouping::Global,
        RingSizing::Fraction(0.5),
        GenMode::BOTH,
        1,
    )
    .unwrap();
    let mut bytes = pack::pack(&net).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    let out = rpg(&[
        "eval",
        "--pack",
        path.to_str().unwrap(),
        "--dataset",
        "synthetic",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3() {
    // A pack whose head bias is NaN: the first fine-tune step produces a
    // non-finite loss.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpg");
    let mut net: Network<f32> = Network::build(
        tiny_net((3, 32, 32), 10, 2, true),
        Grouping::Global,
        RingSizing::Fraction(0.5),
        GenMode::BOTH,
        1,
    )
    .unwrap();
    let head = net.config.nodes.len() - 1;
    net.bias[head].as_mut().unwrap()[0] = f32::NAN;
    std::fs::write(&path, pack::pack(&net).unwrap()).unwrap();

    let out = rpg(&[
        "prune",
        "--pack",
        path.to_str().unwrap(),
        "--fraction",
        "0.1",
        "--finetune-epochs",
        "1",
        "--dataset",
        "synthetic",
        "--synth-train",
        "32",
        "--synth-test",
        "8",
        "--epochs",
        "1",
        "--bs",
        "8",
        "--milestones",
        "",
    ]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn analyze_features_emits_normalized_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rpg");
    let net: Network<f32> = Network::build(
        tiny_net((3, 32, 32), 10, 4, true),
        Grouping::Global,
        RingSizing::Fraction(0.5),
        GenMode::BOTH,
        6,
    )
    .unwrap();
    std::fs::write(&path, pack::pack(&net).unwrap()).unwrap();
    let out = rpg(&[
        "analyze-features",
        "--pack",
        path.to_str().unwrap(),
        "--dataset",
        "synthetic",
        "--synth-train",
        "32",
        "--synth-test",
        "32",
        "--layer",
        "3",
        "--samples",
        "32",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    let total: f64 = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "histogram sums to {total}");
}

#[test]
fn grad_check_reports_pass() {
    let out = rpg(&[
        "grad-check",
        "--arch",
        "tiny-net",
        "--width",
        "2",
        "--ring-size",
        "40",
        "--batch",
        "2",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("pass=true"), "{text}");
}
