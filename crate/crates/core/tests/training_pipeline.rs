use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use dccrn_vae::data::{gen_synthetic_noise, gen_synthetic_speech, NoiseKind, Triple};
use dccrn_vae::frontend::Waveform;
use dccrn_vae::losses::LossLog;
use dccrn_vae::nn::ParamStore;
use dccrn_vae::train::{
    is_clean_decoder, resolve_config, run_training, Checkpoint, Dtype, EnhanceMode, Enhancer, Profile, StageSel,
    TrainConfig, TrainData, Trainer, CKPT_DIR_ENV,
};
use dccrn_vae::Error;

const FS: u32 = 16_000;

fn data(n: u64) -> TrainData {
    let triples: Vec<Triple> = (0..n)
        .map(|i| Triple {
            id: format!("u{i}"),
            clean: gen_synthetic_speech(40 + i, 0.6, FS).unwrap(),
            noise: gen_synthetic_noise(NoiseKind::ALL[i as usize % 3], 80 + i, 0.6, FS).unwrap(),
            snr_db: 0.0,
        })
        .collect();
    TrainData::from_triples(&triples).unwrap()
}

fn config(dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::new(Profile::Desk);
    cfg.batch_size = 2;
    cfg.crop_len = 768;
    cfg.steps = 3;
    cfg.seed = 5;
    cfg.ckpt_dir = dir.to_path_buf();
    cfg
}

/// Hash of every array (parameters and buffers) whose name passes `keep`.
fn hash_where(store: &ParamStore, keep: impl Fn(&str) -> bool) -> u64 {
    let mut h = DefaultHasher::new();
    let mut count = 0;
    for (n, t) in store.params().chain(store.buffers()).filter(|(n, _)| keep(n)) {
        n.hash(&mut h);
        t.iter().for_each(|v| v.to_bits().hash(&mut h));
        count += 1;
    }
    assert!(count > 0);
    h.finish()
}

fn ckpt_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    c.write_to(&mut out, Dtype::F64).unwrap();
    out
}

fn trained(cfg: &TrainConfig, d: &TrainData, stages: &[u8], steps: usize) -> Trainer {
    let mut t = Trainer::new(cfg.clone()).unwrap();
    for &s in stages {
        t.begin_stage(s).unwrap();
        for _ in 0..steps {
            t.step(d).unwrap();
        }
    }
    t
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let t = trained(&cfg, &data(3), &[1], 2);
    let c = t.checkpoint();
    assert!(!c.adam.m.is_empty() && c.adam.t.values().all(|n| *n == 2));
    let path = dir.path().join("x.ckpt");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(ckpt_bytes(&back), std::fs::read(&path).unwrap());

    // Layout: u64 index length, JSON index, raw little-endian arrays.
    let bytes = std::fs::read(&path).unwrap();
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let index: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    let entry = index["arrays"].as_array().unwrap().iter().find(|e| e["name"] == "param/cvae.enc0.conv.w_re").unwrap();
    let offset = 8 + len + entry["offset"].as_u64().unwrap() as usize;
    let first = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
    assert_eq!(first, *c.store.get("cvae.enc0.conv.w_re").unwrap().iter().next().unwrap());
    assert_eq!(index["stage"], 1);
    assert_eq!(index["step"], 2);

    let p32 = dir.path().join("x32.ckpt");
    c.save_as(&p32, Dtype::F32).unwrap();
    let half = Checkpoint::load(&p32).unwrap();
    for (n, v) in c.store.params() {
        let w = half.store.get(n).unwrap();
        assert!(v.iter().zip(w.iter()).all(|(a, b)| *b == (*a as f32) as f64), "{n}");
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let d = data(3);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.begin_stage(1).unwrap();
    let mut losses = Vec::new();
    for _ in 0..4 {
        losses.push(straight.step(&d).unwrap());
    }

    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.begin_stage(1).unwrap();
    first.step(&d).unwrap();
    first.step(&d).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(cfg, Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    assert_eq!(resumed.step(&d).unwrap(), losses[2]);
    assert_eq!(resumed.step(&d).unwrap(), losses[3]);
    assert_eq!(ckpt_bytes(&resumed.checkpoint()), ckpt_bytes(&straight.checkpoint()));
}

#[test]
fn seeded_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let d = data(3);
    let a = trained(&cfg, &d, &[1, 2, 3], 2).checkpoint();
    let b = trained(&cfg, &d, &[1, 2, 3], 2).checkpoint();
    assert_eq!(ckpt_bytes(&a), ckpt_bytes(&b));
    let mut other = cfg.clone();
    other.seed = 6;
    assert_ne!(ckpt_bytes(&trained(&other, &d, &[1], 1).checkpoint()), ckpt_bytes(&trained(&cfg, &d, &[1], 1).checkpoint()));
}

#[test]
fn mismatched_model_is_named_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let mut c = Trainer::new(cfg.clone()).unwrap().checkpoint();
    c.store.insert("nvae.enc2.conv.w_im", ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 3])));
    match Trainer::from_checkpoint(cfg.clone(), c) {
        Err(Error::ShapeMismatch(msg)) => assert!(msg.contains("nvae.enc2.conv.w_im"), "{msg}"),
        other => panic!("expected a shape mismatch, got {:?}", other.err()),
    }
    let desk = Trainer::new(cfg.clone()).unwrap().checkpoint();
    let mut paper = cfg;
    paper.profile = Profile::Paper;
    match Trainer::from_checkpoint(paper, desk) {
        Err(Error::ShapeMismatch(msg)) => assert!(msg.contains("cvae."), "{msg}"),
        other => panic!("expected a shape mismatch, got {:?}", other.err()),
    }
}

#[test]
fn stages_touch_only_their_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let d = data(3);
    let groups: [(&str, fn(&str) -> bool); 5] = [
        ("clean encoder", |n| n.starts_with("cvae.") && !is_clean_decoder(n)),
        ("clean decoder", is_clean_decoder),
        ("noise vae", |n| n.starts_with("nvae.")),
        ("noisy encoder", |n| n.starts_with("nsvae.")),
        ("discriminator", |n| n.starts_with("disc.")),
    ];
    let snapshot = |s: &ParamStore| groups.iter().map(|(_, f)| hash_where(s, f)).collect::<Vec<u64>>();
    let mut t = Trainer::new(cfg).unwrap();
    let mut before = snapshot(&t.store);
    let expected_changes = [[true, true, true, false, false], [false, false, false, true, false], [false, true, false, false, true]];
    for (stage, expect) in (1u8..=3).zip(expected_changes) {
        t.begin_stage(stage).unwrap();
        for _ in 0..2 {
            t.step(&d).unwrap();
        }
        let after = snapshot(&t.store);
        for (k, (name, _)) in groups.iter().enumerate() {
            assert_eq!(before[k] != after[k], expect[k], "stage {stage}: {name}");
        }
        before = after;
    }
    assert_eq!(t.updates, (2, 2));
}

#[test]
fn stage_one_loss_falls_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.crop_len = 512;
    // One utterance shorter than two crops keeps the batches nearly fixed.
    let triple = Triple {
        id: "only".into(),
        clean: gen_synthetic_speech(3, 0.5, FS).unwrap(),
        noise: gen_synthetic_noise(NoiseKind::Pink, 4, 0.5, FS).unwrap(),
        snr_db: 0.0,
    };
    let d = TrainData::from_triples(&[triple]).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.begin_stage(1).unwrap();
    let totals: Vec<f64> = (0..100).map(|_| t.step(&d).unwrap().loss("cvae").unwrap().total).collect();
    let head = totals[..10].iter().sum::<f64>() / 10.0;
    let tail = totals[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < head - 5.0, "{head} -> {tail}");
}

#[test]
fn later_stages_need_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    let d = data(2);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    assert!(matches!(t.begin_stage(2), Err(Error::MissingCheckpoint(_))));
    cfg.stage = StageSel::Two;
    let err = run_training::<Vec<u8>>(&cfg, &d, None, |_| {}).unwrap_err();
    assert!(err.to_string().contains("missing stage-1 checkpoint"), "{err}");

    cfg.stage = StageSel::One;
    cfg.steps = 2;
    let mut log = LossLog::new(Vec::new()).unwrap();
    let mut seen = 0;
    let c1 = run_training(&cfg, &d, Some(&mut log), |_| seen += 1).unwrap();
    assert_eq!((c1.stage, c1.step, seen), (1, 2, 2));
    assert_eq!(Checkpoint::load(&cfg.stage_path(1)).unwrap(), c1);
    let csv = String::from_utf8(log.into_inner()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,stage,component,value"));
    let rows: Vec<&str> = lines.collect();
    // Per step and VAE: total, kl, si_snr.
    assert_eq!(rows.len(), 2 * 2 * 3);
    assert!(rows.iter().any(|r| r.starts_with("2,1,cvae.si_snr,")));

    assert!(Enhancer::from_checkpoint(c1).is_err());
    cfg.stage = StageSel::Two;
    let c2 = run_training::<Vec<u8>>(&cfg, &d, None, |_| {}).unwrap();
    assert_eq!(c2.stage, 2);
    cfg.stage = StageSel::Three;
    let c3 = run_training::<Vec<u8>>(&cfg, &d, None, |_| {}).unwrap();
    assert_eq!(c3.stage, 3);
}

#[test]
fn enhancement_keeps_length_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let t = trained(&cfg, &data(2), &[1, 2], 1);
    let enh = Enhancer::from_checkpoint(t.checkpoint()).unwrap();
    let y = gen_synthetic_speech(9, 0.7, FS).unwrap();
    let y = Waveform::new(y.samples[..11_111].to_vec(), FS).unwrap();
    let a = enh.enhance(&y, EnhanceMode::Noisy).unwrap();
    assert_eq!(a.len(), y.len());
    assert_eq!(a, enh.enhance(&y, EnhanceMode::Noisy).unwrap());
    let o = enh.enhance(&y, EnhanceMode::Oracle(&y)).unwrap();
    assert_eq!(o.len(), y.len());
    let short = Waveform::new(y.samples[..100].to_vec(), FS).unwrap();
    assert!(enh.enhance(&y, EnhanceMode::Oracle(&short)).is_err());
    let wrong_rate = Waveform::new(y.samples.clone(), 8000).unwrap();
    assert!(matches!(enh.enhance(&wrong_rate, EnhanceMode::Noisy), Err(Error::ConfigMismatch(_))));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.stage = StageSel::One;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.begin_stage(1).unwrap();
    t.store.get_mut("cvae.head_mu.w_re").unwrap().fill(f64::NAN);
    match t.run_current_stage::<Vec<u8>>(&data(2), None, |_| {}) {
        Err(Error::NonFinite { stage, step, .. }) => assert_eq!((stage, step), (1, 1)),
        other => panic!("expected NonFinite, got {:?}", other.err()),
    }
    assert!(dir.path().join("nonfinite_stage1_step1.ckpt").exists());
}

#[test]
fn config_precedence_file_env_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "profile = desk\nsteps = 7\nseed = 3\nckpt.dir = from_file\n").unwrap();
    std::env::set_var(CKPT_DIR_ENV, "from_env");
    let cfg = resolve_config(Some(&file), &[("seed".into(), "9".into())]).unwrap();
    assert_eq!((cfg.steps, cfg.seed), (7, 9));
    assert_eq!(cfg.ckpt_dir, Path::new("from_env"));
    let cfg = resolve_config(Some(&file), &[("ckpt.dir".into(), "from_flag".into())]).unwrap();
    assert_eq!(cfg.ckpt_dir, Path::new("from_flag"));
    std::env::remove_var(CKPT_DIR_ENV);
    assert!(resolve_config(None, &[("nope".into(), "1".into())]).is_err());
}
