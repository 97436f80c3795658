//! Desk-profile end-to-end run on a small synthetic corpus, with timings.
//!
//! Usage: desk_run <stage1 steps> <stage2 steps> <stage3 steps> [first stage]
//!
//! Each stage's checkpoint is kept in the temp dir; a later first stage
//! resumes from the previous one.

use std::time::Instant;

use dccrn_vae::data::{gen_synthetic_noise, gen_synthetic_speech, NoiseKind, Triple};
use dccrn_vae::eval::evaluate_triples;
use dccrn_vae::losses::si_snr;
use dccrn_vae::train::{Checkpoint, EnhanceMode, Enhancer, Profile, TrainConfig, TrainData, Trainer};

fn main() -> dccrn_vae::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let steps = [args[0], args[1], args[2]];
    let mut cfg = TrainConfig::new(Profile::Desk);
    let first = args.get(3).copied().unwrap_or(1) as u8;
    cfg.seed = 1;
    cfg.ckpt_dir = std::env::temp_dir().join("desk_run");
    let triples: Vec<Triple> = (0..20u64)
        .map(|i| Triple {
            id: format!("utt_{i:02}"),
            clean: gen_synthetic_speech(1000 + i, 2.0, 16_000).unwrap(),
            noise: gen_synthetic_noise(NoiseKind::ALL[i as usize % 3], 2000 + i, 2.0, 16_000).unwrap(),
            snr_db: 0.0,
        })
        .collect();
    let data = TrainData::from_triples(&triples)?;
    let mut trainer = if first == 1 {
        Trainer::new(cfg.clone())?
    } else {
        Trainer::from_checkpoint(cfg.clone(), Checkpoint::load(&cfg.stage_path(first - 1))?)?
    };
    let total = Instant::now();
    for (k, &n) in steps.iter().enumerate().skip(first as usize - 1) {
        let stage = k as u8 + 1;
        trainer.begin_stage(stage)?;
        let t0 = Instant::now();
        let mut acc: Vec<f64> = Vec::new();
        for i in 0..n {
            let r = trainer.step(&data)?;
            let v = match stage {
                1 => r.loss("cvae").unwrap().get("si_snr").unwrap(),
                2 => r.loss("latent").unwrap().total,
                _ => r.loss("gen").unwrap().get("si_snr").unwrap(),
            };
            acc.push(v);
            if (i + 1) % 50 == 0 {
                let m = acc.iter().sum::<f64>() / acc.len() as f64;
                let extra = if stage == 3 {
                    format!(
                        " disc {:.3} adv {:.3} norms {:?}",
                        r.loss("disc").unwrap().total,
                        r.loss("gen").unwrap().get("adv").unwrap(),
                        r.grad_norms
                    )
                } else {
                    String::new()
                };
                eprintln!("stage {stage} step {} mean {m:.3}{extra} ({:.1}s)", i + 1, t0.elapsed().as_secs_f64());
                acc.clear();
                if stage == 2 {
                    eprintln!("  {:?}", r.loss("latent").unwrap().components);
                }
            }
            if stage == 3 && (i + 1) % 500 == 0 {
                let enh = Enhancer::new(trainer.model.clone(), trainer.store.clone())?;
                let r = evaluate_triples(&triples, |_, y, _| enh.enhance(y, EnhanceMode::Noisy))?.aggregate();
                eprintln!("  eval noisy {:.2} -> enhanced {:.2}", r.si_sdr_noisy, r.si_sdr_enhanced);
            }
            if stage == 1 && (i + 1) % 250 == 0 {
                let enh = Enhancer::new(trainer.model.clone(), trainer.store.clone())?;
                let mut tot = 0.0;
                for t in &triples {
                    let m = dccrn_vae::data::mix_at_snr(&t.clean, &t.noise, 0.0)?;
                    tot += si_snr(&m.clean.samples, &enh.reconstruct(&m.clean)?.samples)?;
                }
                eprintln!("  eval recon si-snr {:.2}", tot / 20.0);
            }
        }
        trainer.checkpoint().save(&cfg.stage_path(stage))?;
        if stage >= 2 {
            let enh = Enhancer::new(trainer.model.clone(), trainer.store.clone())?;
            let r = evaluate_triples(&triples[..5], |_, y, _| enh.enhance(y, EnhanceMode::Noisy))?.aggregate();
            eprintln!("  after stage {stage}: noisy {:.2} -> enhanced {:.2}", r.si_sdr_noisy, r.si_sdr_enhanced);
        }
    }
    let enh = Enhancer::new(trainer.model.clone(), trainer.store.clone())?;
    let noisy = evaluate_triples(&triples, |_, y, _| enh.enhance(y, EnhanceMode::Noisy))?.aggregate();
    let oracle = evaluate_triples(&triples, |_, y, x| enh.enhance(y, EnhanceMode::Oracle(x)))?.aggregate();
    eprintln!("noisy {:?}\noracle {:?}\ntotal {:.1}s", noisy, oracle, total.elapsed().as_secs_f64());
    Ok(())
}
