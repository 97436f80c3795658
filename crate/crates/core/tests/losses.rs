use dccrn_autograd::{Graph, Tensor, Var};
use dccrn_vae::cgauss::{kl_analytic, log_density, make_cgd_var, sample, standard_prior, CgdParams, LatentSample};
use dccrn_vae::losses::{
    gan_discriminator_loss, gan_discriminator_loss_var, gan_generator_loss, gan_generator_loss_var, latent_loss,
    latent_loss_var, si_snr, si_snr_projection, si_snr_var, stage1_loss, stage1_loss_var,
};
use dccrn_vae::nn::{grad_check, GradCheckOptions, ParamStore, Session};
use dccrn_vae::Error;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn noise_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// SI-SNR from the correlation coefficient: 10 log10(rho^2 / (1 - rho^2)).
fn correlation_oracle(r: &[f64], e: &[f64]) -> f64 {
    let n = r.len() as f64;
    let (mr, me) = (r.iter().sum::<f64>() / n, e.iter().sum::<f64>() / n);
    let cov: f64 = r.iter().zip(e).map(|(a, b)| (a - mr) * (b - me)).sum();
    let vr: f64 = r.iter().map(|a| (a - mr).powi(2)).sum();
    let ve: f64 = e.iter().map(|b| (b - me).powi(2)).sum();
    let rho2 = cov * cov / (vr * ve);
    10.0 * (rho2 / (1.0 - rho2)).log10()
}

fn single(mu: Complex64, sigma: f64, delta: Complex64) -> CgdParams {
    CgdParams {
        mu: Array2::from_elem((1, 1), mu),
        sigma: Array2::from_elem((1, 1), sigma),
        delta: Array2::from_elem((1, 1), delta),
    }
}

#[test]
fn projection_hand_example() {
    // t = [1, 0] and e - t = [0, 1], so the ratio is 1 / (1 + guard).
    let v = si_snr_projection(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!(v.abs() < 1e-7, "{v}");
}

#[test]
fn identity_hits_the_guard_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = noise_signal(&mut rng, 1000);
    let m = x.iter().sum::<f64>() / 1000.0;
    let norm = x.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v = (*v - m) / norm);
    assert!((si_snr(&x, &x).unwrap() - 80.0).abs() < 1e-6);
}

#[test]
fn matches_correlation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..10 {
        let r = noise_signal(&mut rng, 500);
        let n = noise_signal(&mut rng, 500);
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| 0.7 * a + 0.1 * k as f64 * b + 0.3).collect();
        if k == 0 {
            continue;
        }
        assert!((si_snr(&r, &e).unwrap() - correlation_oracle(&r, &e)).abs() < 1e-6);
    }
}

#[test]
fn graph_si_snr_matches_plain_per_item() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = rand_tensor(&mut rng, &[3, 200]);
    let e = rand_tensor(&mut rng, &[3, 200]);
    let g = Graph::new();
    let v = si_snr_var(&g, g.constant(r.clone()), g.constant(e.clone())).unwrap();
    for b in 0..3 {
        let row = |t: &Tensor| t.index_axis(ndarray::Axis(0), b).iter().copied().collect::<Vec<_>>();
        assert!((g.value(v)[[b]] - si_snr(&row(&r), &row(&e)).unwrap()).abs() < 1e-10);
    }
    let silent = g.constant(Tensor::from_elem(IxDyn(&[3, 200]), 0.25));
    assert!(matches!(si_snr_var(&g, silent, g.constant(e)), Err(Error::SilentInput(_))));
}

#[test]
fn stage1_hand_case() {
    let posterior = single(Complex64::new(1.0, 0.0), 2.0, Complex64::new(0.0, 0.0));
    let target = [1.0, 0.0, -1.0, 0.0];
    let recon = [1.0, 1.0, -1.0, -1.0];
    assert!(si_snr(&target, &recon).unwrap().abs() < 1e-7);
    let loss = stage1_loss(&posterior, &recon, &target, 100_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let exact = 2.0 - 2f64.ln();
    assert!((loss.total - exact).abs() < 0.02 * exact, "{loss:?}");
    assert_eq!(loss.total, loss.get("kl").unwrap() - loss.get("si_snr").unwrap());
}

#[test]
fn stage1_prior_and_perfect_recon_sits_at_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = noise_signal(&mut rng, 256);
    let m = x.iter().sum::<f64>() / 256.0;
    let norm = x.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v = (*v - m) / norm);
    let loss = stage1_loss(&standard_prior(3, 4), &x, &x, 10, &mut rng).unwrap();
    assert_eq!(loss.get("kl").unwrap(), 0.0);
    assert!((loss.total + 80.0).abs() < 1e-6);
}

#[test]
fn stage1_graph_kl_matches_plain_density_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, l) = (3, 2);
    let raws: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[1, t, l])).collect();
    let n_re = rand_tensor(&mut rng, &[1, t, l]);
    let n_im = rand_tensor(&mut rng, &[1, t, l]);
    let wave = rand_tensor(&mut rng, &[1, 64]);
    let g = Graph::new();
    let c: Vec<Var> = raws.iter().map(|r| g.constant(r.clone())).collect();
    let post = make_cgd_var(&g, c[0], c[1], c[2], c[3], c[4]);
    let terms = stage1_loss_var(&g, &post, (g.constant(n_re.clone()), g.constant(n_im.clone())), g.constant(wave.clone()), g.constant(wave)).unwrap();
    let kl_graph = terms.breakdown(&g).get("kl").unwrap();

    let p = CgdParams::from_vars(&g, &post, 0);
    let noise = Array3::from_shape_fn((l, t, 2), |(i, j, k)| if k == 0 { n_re[[0, j, i]] } else { n_im[[0, j, i]] });
    let z: LatentSample = sample(&p, &noise).unwrap();
    let lp = log_density(&p, &z).unwrap();
    let lq = log_density(&standard_prior(l, t), &z).unwrap();
    let kl_plain = (&lp - &lq).sum();
    assert!((kl_graph - kl_plain).abs() < 1e-10, "{kl_graph} vs {kl_plain}");
}

fn tiny_skips(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_tensor(rng, &[4, 3, 2]), rand_tensor(rng, &[2, 2, 2]), rand_tensor(rng, &[6, 1, 2])]
}

fn random_params(rng: &mut ChaCha8Rng, l: usize, t: usize) -> CgdParams {
    CgdParams {
        mu: Array2::from_shape_simple_fn((l, t), || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
        sigma: Array2::from_shape_simple_fn((l, t), || rng.random_range(0.5..2.0)),
        delta: Array2::from_shape_simple_fn((l, t), || Complex64::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))),
    }
}

#[test]
fn latent_loss_vanishes_at_the_oracle_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = random_params(&mut rng, 2, 2);
    let r = tiny_skips(&mut rng);
    let loss = latent_loss(&q, &q, &q, &r, &r, 0.25, 50, &mut rng).unwrap();
    assert_eq!(loss.total, 0.0);
}

#[test]
fn latent_loss_components_recombine_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, px, pd) = (random_params(&mut rng, 2, 2), random_params(&mut rng, 2, 2), random_params(&mut rng, 2, 2));
    let (rx, ryx) = (tiny_skips(&mut rng), tiny_skips(&mut rng));
    let loss = latent_loss(&q, &px, &pd, &rx, &ryx, 0.25, 20, &mut rng).unwrap();
    let c = |n: &str| loss.get(n).unwrap();
    assert_eq!(loss.total, (c("kl_q_y_p_x") - 0.25 * c("kl_q_y_p_d")) + c("residual"));

    let no_alpha = latent_loss(&q, &px, &pd, &rx, &ryx, 0.0, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(no_alpha.total, no_alpha.get("kl_q_y_p_x").unwrap() + no_alpha.get("residual").unwrap());
    assert!(latent_loss(&q, &px, &pd, &rx, &ryx, -1.0, 20, &mut rng).is_err());
}

#[test]
fn residual_of_unit_offset_counts_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_params(&mut rng, 1, 2);
    let rx = tiny_skips(&mut rng);
    let ryx: Vec<Tensor> = rx.iter().map(|t| t + 1.0).collect();
    let loss = latent_loss(&q, &q, &q, &rx, &ryx, 0.25, 5, &mut rng).unwrap();
    assert!((loss.get("residual").unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn latent_kl_terms_match_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (q, px, pd) = (random_params(&mut rng, 2, 1), random_params(&mut rng, 2, 1), random_params(&mut rng, 2, 1));
    let r = tiny_skips(&mut rng);
    let loss = latent_loss(&q, &px, &pd, &r, &r, 0.25, 100_000, &mut rng).unwrap();
    let kx = kl_analytic(&q, &px).unwrap();
    let kd = kl_analytic(&q, &pd).unwrap();
    assert!((loss.get("kl_q_y_p_x").unwrap() - kx).abs() < 0.03 * kx.max(0.1));
    assert!((loss.get("kl_q_y_p_d").unwrap() - kd).abs() < 0.03 * kd.max(0.1));
}

#[test]
fn shape_mismatches_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_params(&mut rng, 2, 2);
    let p = random_params(&mut rng, 2, 3);
    let r = tiny_skips(&mut rng);
    assert!(matches!(latent_loss(&q, &p, &q, &r, &r, 0.25, 3, &mut rng), Err(Error::ShapeMismatch(_))));
    assert!(matches!(latent_loss(&q, &q, &q, &r, &r[..2], 0.25, 3, &mut rng), Err(Error::ShapeMismatch(_))));
}

#[test]
fn adversarial_plug_in_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = noise_signal(&mut rng, 300);
    let n = noise_signal(&mut rng, 300);
    let recon: Vec<f64> = target.iter().zip(&n).map(|(a, b)| a + 0.3 * b).collect();
    let snr = si_snr(&target, &recon).unwrap();
    let gen = gan_generator_loss(0.0, &recon, &target).unwrap();
    assert_eq!(gen.total, 1.0 - snr);
    assert_eq!(gen.get("adv"), Some(1.0));
    assert_eq!(gan_discriminator_loss(0.5, 0.5).total, 0.5);

    let g = Graph::new();
    let score = g.param(Tensor::zeros(IxDyn(&[1])));
    let row = |v: &[f64]| g.constant(Tensor::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).unwrap());
    let terms = gan_generator_loss_var(&g, score, row(&recon), row(&target)).unwrap();
    assert!((g.scalar(terms.total) - (1.0 - snr)).abs() < 1e-10);
    let grads = g.backward(terms.total);
    assert_eq!(grads.get(score).unwrap()[[0]], -2.0);

    let fake = g.constant(Tensor::from_elem(IxDyn(&[2]), 1.0));
    let real = g.constant(Tensor::zeros(IxDyn(&[2])));
    assert_eq!(g.scalar(gan_discriminator_loss_var(&g, fake, real).total), 2.0);
}

#[test]
fn losses_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    for name in ["mu_re", "mu_im", "sigma", "delta_re", "delta_im", "px_mu", "pd_sigma"] {
        store.insert(name, rand_tensor(&mut rng, &[2, 3, 2]));
    }
    store.insert("target", rand_tensor(&mut rng, &[2, 40]));
    store.insert("recon", rand_tensor(&mut rng, &[2, 40]));
    store.insert("score", rand_tensor(&mut rng, &[2]));
    store.insert("rx", rand_tensor(&mut rng, &[2, 4, 2, 3]));
    store.insert("ryx", rand_tensor(&mut rng, &[2, 4, 2, 3]));
    let noise = (rand_tensor(&mut rng, &[2, 3, 2]), rand_tensor(&mut rng, &[2, 3, 2]));
    let names = store.param_names();
    let report = grad_check(
        &store,
        &names,
        |s: &Session| {
            let g = s.g;
            let p = |n: &str| s.param(n);
            let q = make_cgd_var(g, p("mu_re")?, p("mu_im")?, p("sigma")?, p("delta_re")?, p("delta_im")?);
            let px = make_cgd_var(g, p("px_mu")?, p("mu_im")?, p("sigma")?, p("delta_im")?, p("delta_re")?);
            let pd = make_cgd_var(g, p("mu_im")?, p("mu_re")?, p("pd_sigma")?, p("delta_re")?, p("delta_re")?);
            let nz = (g.constant(noise.0.clone()), g.constant(noise.1.clone()));
            let s1 = stage1_loss_var(g, &q, nz, p("recon")?, p("target")?)?;
            let la = latent_loss_var(g, &q, &px, &pd, nz, &[p("rx")?], &[p("ryx")?], 0.25)?;
            let gen = gan_generator_loss_var(g, p("score")?, p("recon")?, p("target")?)?;
            let disc = gan_discriminator_loss_var(g, p("score")?, g.scale(p("score")?, -0.5));
            Ok(g.add(g.add(s1.total, la.total), g.add(gen.total, disc.total)))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

proptest! {
    #[test]
    fn si_snr_ignores_gain_and_offset(seed in 0u64..1000, gain in 1e-3f64..1e3, offset in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = noise_signal(&mut rng, 128);
        let n = noise_signal(&mut rng, 128);
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + 0.5 * b).collect();
        let e2: Vec<f64> = e.iter().map(|v| gain * v + offset).collect();
        prop_assert!((si_snr(&r, &e).unwrap() - si_snr(&r, &e2).unwrap()).abs() < 1e-6);
    }
}
