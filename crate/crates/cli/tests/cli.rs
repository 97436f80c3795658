use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccrn-vae"))
        .args(args)
        .env_remove("DCCRN_VAE_CKPT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn synth(dir: &Path) {
    let o = cli(&["synth-data", "--out", dir.to_str().unwrap(), "--utterances", "10", "--duration", "1.0", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
}

fn train(manifest: &Path, ckpt: &Path, stage: &str) -> Output {
    cli(&[
        "train",
        "--stage",
        stage,
        "--manifest",
        manifest.to_str().unwrap(),
        "--ckpt-dir",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--set",
        "crop_len=768",
        "--log-every",
        "1",
    ])
}

#[test]
fn help_and_usage_errors() {
    let o = cli(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = text(&o);
    for sub in ["synth-data", "train", "enhance", "evaluate", "gradcheck", "selftest"] {
        assert!(help.contains(sub), "{help}");
    }
    assert!(help.contains("DCCRN_VAE_CKPT_DIR"));
    assert_eq!(cli(&["bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["train"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--stage", "4"]).status.code(), Some(1));
    let o = cli(&["enhance", "--in", "a.wav", "--out", "b.wav", "--ckpt", "c.ckpt", "--oracle"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn stage_two_without_stage_one_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"));
    let o = train(&dir.path().join("data/manifest.jsonl"), &dir.path().join("ckpt"), "2");
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("missing stage-1 checkpoint"), "{}", text(&o));
}

#[test]
fn bad_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["train", "--stage", "1", "--set", "warp=9", "--ckpt-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("unknown key"));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "steps = many\n").unwrap();
    let o = cli(&["train", "--stage", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = cli(&["train", "--stage", "1", "--ckpt-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("manifest"));
}

#[test]
fn selftest_reports_every_family() {
    let o = cli(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().filter(|l| l.contains("passed")).collect();
    assert_eq!(lines.len(), 5, "{out}");
}

#[test]
fn synth_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("a"));
    synth(&dir.path().join("b"));
    for f in ["manifest.jsonl", "clean/utt_0003.wav"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_enhance_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let manifest = data.join("manifest.jsonl");
    let ckpt = dir.path().join("ckpt");
    for stage in ["1", "2", "3"] {
        let o = train(&manifest, &ckpt, stage);
        assert_eq!(o.status.code(), Some(0), "stage {stage}: {}", text(&o));
        assert!(ckpt.join(format!("stage{stage}.ckpt")).exists());
    }
    let csv = std::fs::read_to_string(ckpt.join("losses.csv")).unwrap();
    assert!(csv.starts_with("step,stage,component,value\n"));
    assert!(csv.contains(",3,gen.si_snr,"));

    let stage3 = ckpt.join("stage3.ckpt");
    let record: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&manifest).unwrap().lines().nth(1).unwrap()).unwrap();
    let noisy = data.join(record["clean"].as_str().unwrap());
    let out = dir.path().join("out.wav");
    let o = cli(&["enhance", "--in", noisy.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ckpt", stage3.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::metadata(&out).unwrap().len(), std::fs::metadata(&noisy).unwrap().len());
    let o = cli(&[
        "enhance",
        "--in",
        noisy.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ckpt",
        stage3.to_str().unwrap(),
        "--oracle",
        "--clean",
        noisy.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));

    let report = dir.path().join("report.csv");
    let json = dir.path().join("agg.json");
    let o = cli(&[
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ckpt",
        stage3.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let rows = std::fs::read_to_string(&report).unwrap();
    assert!(rows.starts_with("id,snr_db,si_sdr_noisy,si_sdr_enhanced,stoi_noisy,stoi_enhanced\n"));
    assert_eq!(rows.lines().count(), 2);
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(agg["count"], 1);

    let o = cli(&["enhance", "--in", noisy.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ckpt", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}
