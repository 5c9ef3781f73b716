//! End-to-end command-line tests on a miniature configuration: exit codes,
//! file formats, and bit-exact reproducibility from echoed configs.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_biaslab")
}

struct Run {
    status: std::process::ExitStatus,
    stdout: String,
    stderr: String,
}

fn run_in(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn biaslab");
    Run {
        status: out.status,
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// The output directory the command printed, resolved against its cwd.
fn out_dir(base: &Path, run: &Run) -> PathBuf {
    base.join(run.stdout.trim())
}

const SMOKE_CONFIG: &str = r#"
seed = 5

[data]
n_per_class = 40
side = 32

[train]
epochs = 2

[gebi]
knn_k = 3
image_dims = 2
attribution_dims = 4
cluster_k = 2
explainer = "saliency"

[gebi_export]
maps = 2

[tda]
probabilities = [0.0, 1.0]
seeds = [1]

[feedback]
epochs = 1

[stda]
pairs = 2

[stda.nst]
iterations = 2
"#;

fn setup(dir: &Path) -> PathBuf {
    let cfg = dir.join("smoke.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    cfg
}

#[test]
fn full_command_chain_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    let gen = run_in(dir, &["--config", "smoke.toml", "--out", "a", "gen-data"]);
    assert!(gen.status.success(), "{}", gen.stderr);
    let dataset = out_dir(dir, &gen).join("dataset");
    let dataset_str = dataset.to_str().unwrap().to_string();
    assert!(dataset.join("manifest.csv").exists());

    let train = run_in(
        dir,
        &["--config", "smoke.toml", "--out", "a", "train", "--data", &dataset_str],
    );
    assert!(train.status.success(), "{}", train.stderr);
    let model = out_dir(dir, &train).join("model.bin");
    let model_str = model.to_str().unwrap().to_string();
    assert!(model.exists());

    for (cmd, extra) in [
        ("audit-cbi", vec!["--model", model_str.as_str()]),
        ("audit-gebi", vec!["--model", model_str.as_str()]),
        ("stats", vec![]),
        ("sweep-tda", vec![]),
        ("finetune-attr", vec!["--model", model_str.as_str()]),
        ("stda", vec!["--model", model_str.as_str()]),
    ] {
        let mut args = vec!["--config", "smoke.toml", "--out", "a", cmd, "--data", &dataset_str];
        args.extend(extra);
        let r = run_in(dir, &args);
        assert!(r.status.success(), "{cmd}: {}", r.stderr);
        let out = out_dir(dir, &r);
        assert!(out.join("config.toml").exists(), "{cmd} did not echo config");
    }

    // every artifact regenerates bit-identically from the echoed config
    let echoed = out_dir(dir, &gen).join("config.toml");
    let echoed_str = echoed.to_str().unwrap().to_string();
    let gen2 = run_in(dir, &["--config", &echoed_str, "--out", "b", "gen-data"]);
    assert!(gen2.status.success(), "{}", gen2.stderr);
    let dataset2 = out_dir(dir, &gen2).join("dataset");
    for entry in std::fs::read_dir(&dataset).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dataset.join(&name)).unwrap();
        let b = std::fs::read(dataset2.join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between reruns");
    }
}

#[test]
fn gen_data_with_zero_samples_writes_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("zero.toml"),
        "[data]\nn_per_class = 0\nside = 32\n",
    )
    .unwrap();
    let r = run_in(dir, &["--config", "zero.toml", "--out", "z", "gen-data"]);
    assert!(r.status.success(), "{}", r.stderr);
    let manifest = std::fs::read_to_string(out_dir(dir, &r).join("dataset/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1, "only the header expected");
}

#[test]
fn exit_codes_reflect_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // malformed config -> 2
    std::fs::write(dir.join("bad.toml"), "no_such_key = true\n").unwrap();
    let r = run_in(dir, &["--config", "bad.toml", "--out", "x", "gen-data"]);
    assert_eq!(r.status.code(), Some(2), "{}", r.stderr);

    // missing dataset -> 3
    let cfg = setup(dir);
    let cfg_str = cfg.to_str().unwrap().to_string();
    let r = run_in(
        dir,
        &["--config", &cfg_str, "--out", "x", "stats", "--data", "nowhere"],
    );
    assert_eq!(r.status.code(), Some(3), "{}", r.stderr);

    // malformed PGM payload -> 3, with a diagnostic
    let ds = dir.join("broken");
    std::fs::create_dir_all(&ds).unwrap();
    std::fs::write(
        ds.join("manifest.csv"),
        "id,filename,label,split,frame,ruler,hair,circle,object_cx,object_cy,object_r\n\
         0,img.pgm,0,test,0,0,0,0,0,0,0\n",
    )
    .unwrap();
    std::fs::write(ds.join("img.pgm"), b"P5\n4 4\n255\nxx").unwrap();
    let r = run_in(
        dir,
        &["--config", &cfg_str, "--out", "x", "stats", "--data", "broken"],
    );
    assert_eq!(r.status.code(), Some(3), "{}", r.stderr);
    assert!(r.stderr.contains("truncated"), "{}", r.stderr);
}

#[test]
fn repro_writes_the_narrative_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // a very small repro so the test stays quick
    std::fs::write(
        dir.join("micro.toml"),
        r#"
seed = 3

[data]
n_per_class = 40
side = 32

[train]
epochs = 2

[gebi]
knn_k = 3
image_dims = 2
attribution_dims = 4
cluster_k = 2
explainer = "saliency"

[gebi_export]
maps = 0
contact_sheets = false

[tda]
probabilities = [0.0, 1.0]
seeds = [1]

[feedback]
epochs = 1

[repro]
mitigation_n_per_class = 40
"#,
    )
    .unwrap();
    let r = run_in(dir, &["--config", "micro.toml", "--out", "r", "repro"]);
    assert!(r.status.success(), "{}", r.stderr);
    let out = out_dir(dir, &r);
    for name in [
        "stats_report.json",
        "train_report.json",
        "gebi_report.json",
        "cbi_report.json",
        "cbi_control_report.json",
        "tda_sweep.csv",
        "attr_finetune.json",
        "model.bin",
        "config.toml",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let sweep = std::fs::read_to_string(out.join("tda_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "header + 2 sweep rows");
}
