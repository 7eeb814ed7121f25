use dtpsr_core::denoiser::{Denoiser, DenoiserConfig, TrainExample};
use dtpsr_core::diffusion::{
    ddpm_step, forward_diffuse, make_schedule, sample, training_loss, Conditioning, LatentTensor,
    NoisePredictor, NoiseSchedule, PosteriorVariance, SamplingPlan, INITIAL_NOISE_STREAM,
};
use dtpsr_core::gradcheck::{check_gradients, randomize_params};
use dtpsr_core::guidance::Guidance;
use dtpsr_core::prior::{Embeddings, LrFeatureTokens, PriorBundle};
use dtpsr_core::rng::normal_vec;
use dtpsr_core::Result;
use proptest::prelude::*;

fn empty_cond_parts(shape: [usize; 3]) -> (LatentTensor, PriorBundle, LrFeatureTokens) {
    (
        LatentTensor::zeros(shape),
        PriorBundle::empty(4),
        LrFeatureTokens::new(0, 4, vec![]).unwrap(),
    )
}

struct Fixed(LatentTensor);

impl NoisePredictor for Fixed {
    fn predict_noise(
        &self,
        _: &LatentTensor,
        _: usize,
        _: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        Ok(self.0.clone())
    }
}

/// `eps_hat = a_t · z_t + b · z_lr`, with `a_t = 0.1 + 0.01 t`.
struct Linear {
    b: f64,
}

impl NoisePredictor for Linear {
    fn predict_noise(
        &self,
        z: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        z.axpby(0.1 + 0.01 * t as f64, cond.lr_latent, self.b)
    }
}

#[test]
fn long_schedule_final_alpha_bar() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    // independent: exp of the summed log-survival with betas recomputed
    let log_sum: f64 = (0..1000)
        .map(|i| {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            (-beta).ln_1p()
        })
        .sum();
    let oracle = log_sum.exp();
    assert!((s.alpha_bars()[999] - oracle).abs() / oracle < 1e-10);
    assert!((s.alpha_bars()[999] - 4.04e-5).abs() < 0.01e-5);
}

#[test]
fn ddpm_step_matches_scalar_posterior_at_t5() {
    let s = make_schedule(10, 1e-4, 0.02).unwrap();
    let mut ab = 1.0;
    let mut betas = Vec::new();
    for i in 0..10 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0;
        betas.push(beta);
        ab *= 1.0 - beta;
        if i == 5 {
            break;
        }
    }
    let beta = betas[5];
    let ab5 = ab;
    let ab4 = ab5 / (1.0 - beta);
    let cz = 1.0 / (1.0 - beta).sqrt();
    let ce = -beta / ((1.0 - ab5).sqrt() * (1.0 - beta).sqrt());
    let sigma_post = (beta * (1.0 - ab4) / (1.0 - ab5)).sqrt();
    let sigma_beta = beta.sqrt();

    let z = LatentTensor::standard_normal([2, 3, 3], 4, 0);
    let e = LatentTensor::standard_normal([2, 3, 3], 4, 1);
    let n = LatentTensor::standard_normal([2, 3, 3], 4, 2);
    let zero = LatentTensor::zeros([2, 3, 3]);
    let det = ddpm_step(&z, &e, 5, &s, Some(&zero), PosteriorVariance::Posterior).unwrap();
    let post = ddpm_step(&z, &e, 5, &s, Some(&n), PosteriorVariance::Posterior).unwrap();
    let full = ddpm_step(&z, &e, 5, &s, Some(&n), PosteriorVariance::Beta).unwrap();
    for i in 0..z.len() {
        let mean = cz * z.data()[i] + ce * e.data()[i];
        assert!((det.data()[i] - mean).abs() < 1e-12);
        assert!((post.data()[i] - (mean + sigma_post * n.data()[i])).abs() < 1e-12);
        assert!((full.data()[i] - (mean + sigma_beta * n.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn two_step_sample_matches_hand_unrolled_loop() {
    let s = make_schedule(2, 0.1, 0.2).unwrap();
    let plan = SamplingPlan::new(&s, 2, PosteriorVariance::Posterior).unwrap();
    let shape = [1, 2, 2];
    let z_lr = LatentTensor::new(1, 2, 2, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
    let priors = PriorBundle::empty(4);
    let lr = LrFeatureTokens::new(0, 4, vec![]).unwrap();
    let cond = Conditioning {
        lr_latent: &z_lr,
        priors: &priors,
        lr_tokens: &lr,
    };
    let seed = 99;
    let got = sample(
        &Linear { b: 0.3 },
        &cond,
        &Guidance::disabled(),
        &plan,
        seed,
    )
    .unwrap();

    // hand-unrolled: betas 0.1, 0.2; alpha_bars 0.9, 0.72
    let mut z = normal_vec(seed, INITIAL_NOISE_STREAM, 4);
    let n1 = normal_vec(seed, 1, 4);
    let var1: f64 = 0.2 * (1.0 - 0.9) / (1.0 - 0.72);
    for i in 0..4 {
        let eps = 0.11 * z[i] + 0.3 * z_lr.data()[i];
        z[i] = (z[i] - 0.2 / (1.0f64 - 0.72).sqrt() * eps) / 0.8f64.sqrt() + var1.sqrt() * n1[i];
    }
    for i in 0..4 {
        let eps = 0.1 * z[i] + 0.3 * z_lr.data()[i];
        z[i] = (z[i] - 0.1 / (1.0f64 - 0.9).sqrt() * eps) / 0.9f64.sqrt();
    }
    assert_eq!(got.shape(), shape);
    for (a, b) in got.data().iter().zip(&z) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let plan = SamplingPlan::new(&s, 50, PosteriorVariance::Posterior).unwrap();
    let (z_lr, priors, lr) = empty_cond_parts([2, 4, 4]);
    let cond = Conditioning {
        lr_latent: &z_lr,
        priors: &priors,
        lr_tokens: &lr,
    };
    let p = Linear { b: 0.5 };
    let a = sample(&p, &cond, &Guidance::disabled(), &plan, 3).unwrap();
    let b = sample(&p, &cond, &Guidance::disabled(), &plan, 3).unwrap();
    let c = sample(&p, &cond, &Guidance::disabled(), &plan, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn guidance_collapses_with_zero_scale_or_equal_priors() {
    let cfg = DenoiserConfig {
        base_channels: 4,
        embed_dim: 4,
        latent_channels: 2,
        text_dim: 4,
        lr_token_dim: 4,
        time_dim: 4,
        ..DenoiserConfig::default()
    };
    let mut net = Denoiser::new(cfg, 1).unwrap();
    randomize_params(net.params_mut(), 1, 1.0);
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let plan = SamplingPlan::new(&s, 10, PosteriorVariance::Posterior).unwrap();
    let z_lr = LatentTensor::standard_normal([2, 4, 4], 5, 0);
    let pos = PriorBundle {
        global: Embeddings::from_rows(4, vec![normal_vec(1, 0, 4)]).unwrap(),
        lf: Embeddings::from_rows(4, vec![normal_vec(1, 1, 4)]).unwrap(),
        hf: Embeddings::from_rows(4, vec![normal_vec(1, 2, 4)]).unwrap(),
    };
    let lr = LrFeatureTokens::new(2, 4, normal_vec(1, 3, 8)).unwrap();
    let cond = Conditioning {
        lr_latent: &z_lr,
        priors: &pos,
        lr_tokens: &lr,
    };
    let plain = sample(&net, &cond, &Guidance::disabled(), &plan, 8).unwrap();
    let neg = PriorBundle::empty(4);
    let zero_scale = sample(
        &net,
        &cond,
        &Guidance::with_negative(0.0, neg.clone()),
        &plan,
        8,
    )
    .unwrap();
    let same = sample(
        &net,
        &cond,
        &Guidance::with_negative(7.0, pos.clone()),
        &plan,
        8,
    )
    .unwrap();
    let guided = sample(&net, &cond, &Guidance::with_negative(7.0, neg), &plan, 8).unwrap();
    assert_eq!(plain, zero_scale);
    assert_eq!(plain, same);
    assert_ne!(plain, guided);
}

#[test]
fn training_loss_reference_cases() {
    let s = make_schedule(10, 1e-4, 0.02).unwrap();
    let shape = [4, 16, 16];
    let z0 = LatentTensor::standard_normal(shape, 1, 0);
    let eps = LatentTensor::standard_normal(shape, 1, 1);
    let (z_lr, priors, lr) = empty_cond_parts(shape);
    let cond = Conditioning {
        lr_latent: &z_lr,
        priors: &priors,
        lr_tokens: &lr,
    };
    assert_eq!(
        training_loss(&Fixed(eps.clone()), &z0, &cond, 3, &eps, &s).unwrap(),
        0.0
    );
    let shifted = eps
        .axpby(1.0, &LatentTensor::filled(shape, 2.0), 1.0)
        .unwrap();
    assert!((training_loss(&Fixed(shifted), &z0, &cond, 3, &eps, &s).unwrap() - 4.0).abs() < 1e-12);

    let big = [1, 400, 400];
    let eps = LatentTensor::standard_normal(big, 2, 0);
    let (z_lr, priors, lr) = empty_cond_parts(big);
    let cond = Conditioning {
        lr_latent: &z_lr,
        priors: &priors,
        lr_tokens: &lr,
    };
    let loss = training_loss(&Fixed(LatentTensor::zeros(big)), &z_lr, &cond, 0, &eps, &s).unwrap();
    // Monte-Carlo oracle: mean of squares over the same draws
    let mc = eps.data().iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
    assert!((loss - mc).abs() < 1e-12);
    assert!((loss - 1.0).abs() < 0.01);

    struct Bad;
    impl NoisePredictor for Bad {
        fn predict_noise(
            &self,
            z: &LatentTensor,
            _: usize,
            _: &Conditioning<'_>,
        ) -> Result<LatentTensor> {
            Ok(LatentTensor::zeros([
                z.shape()[0],
                z.shape()[1],
                z.shape()[2] + 1,
            ]))
        }
    }
    assert!(training_loss(&Bad, &z_lr, &cond, 0, &eps, &s).is_err());
}

#[test]
fn forward_diffusion_variance_matches_schedule() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let shape = [1, 1, 100_000];
    let z0 = LatentTensor::zeros(shape);
    for t in [250, 500, 999] {
        let eps = LatentTensor::standard_normal(shape, 11, t as u64);
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let n = zt.len() as f64;
        let mean = zt.data().iter().sum::<f64>() / n;
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 1.0 - s.alpha_bars()[t];
        assert!(
            (var - expect).abs() / expect < 0.02,
            "t={t} var={var} expect={expect}"
        );
    }
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let cfg = DenoiserConfig {
        base_channels: 2,
        depth: 1,
        embed_dim: 2,
        attention_heads: 1,
        latent_channels: 1,
        text_dim: 2,
        lr_token_dim: 2,
        time_dim: 2,
        ..DenoiserConfig::default()
    };
    assert!(cfg.parameter_count() <= 1000, "{}", cfg.parameter_count());
    let mut net = Denoiser::new(cfg, 4).unwrap();
    randomize_params(net.params_mut(), 4, 1.0);
    let z0 = LatentTensor::standard_normal([1, 4, 4], 6, 0);
    let eps = LatentTensor::standard_normal([1, 4, 4], 6, 1);
    let z_lr = LatentTensor::standard_normal([1, 4, 4], 6, 2);
    let priors = PriorBundle {
        global: Embeddings::from_rows(2, vec![normal_vec(6, 3, 2)]).unwrap(),
        lf: Embeddings::from_rows(2, vec![normal_vec(6, 4, 2), normal_vec(6, 5, 2)]).unwrap(),
        hf: Embeddings::from_rows(2, vec![normal_vec(6, 6, 2), normal_vec(6, 7, 2)]).unwrap(),
    };
    let lr = LrFeatureTokens::new(3, 2, normal_vec(6, 8, 6)).unwrap();
    let s = make_schedule(50, 1e-4, 0.02).unwrap();
    let ex = TrainExample {
        z0: &z0,
        cond: Conditioning {
            lr_latent: &z_lr,
            priors: &priors,
            lr_tokens: &lr,
        },
        t: 20,
        eps: &eps,
    };
    let report = check_gradients(&net, &ex, &s, 1e-4, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn schedule_args() -> impl Strategy<Value = (usize, f64, f64)> {
    (1usize..400, 1e-5f64..0.05, 0.0f64..0.5)
        .prop_map(|(n, start, extra)| (n, start, (start + extra).min(0.9)))
}

proptest! {
    #[test]
    fn schedule_invariants((n, start, end) in schedule_args()) {
        let s = make_schedule(n, start, end).unwrap();
        prop_assert_eq!(s.num_steps(), n);
        let mut prod = 1.0;
        for t in 0..n {
            let b = s.betas()[t];
            prop_assert!(b > 0.0 && b < 1.0);
            if t > 0 {
                prop_assert!(b >= s.betas()[t - 1]);
                prop_assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
            }
            prod *= s.alphas()[t];
            prop_assert!((s.alpha_bars()[t] - prod).abs() <= 1e-12 * prod);
        }
        prop_assert!(s.alpha_bars()[n - 1] > 0.0);
        prop_assert!(s.alpha_bars()[0] < 1.0);
    }

    #[test]
    fn noiseless_forward_scales_norm(seed in 0u64..1000, t in 0usize..100) {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = LatentTensor::standard_normal([3, 4, 4], seed, 0);
        let zt = forward_diffuse(&z0, t, &LatentTensor::zeros([3, 4, 4]), &s).unwrap();
        let expect = s.alpha_bars()[t].sqrt() * z0.norm();
        prop_assert!((zt.norm() - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn ddpm_step_is_affine_in_inputs(seed in 0u64..1000, t in 0usize..10, a in -2.0f64..2.0) {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let z1 = LatentTensor::standard_normal([2, 2, 2], seed, 0);
        let z2 = LatentTensor::standard_normal([2, 2, 2], seed, 1);
        let e = LatentTensor::standard_normal([2, 2, 2], seed, 2);
        let step = |z: &LatentTensor| ddpm_step(z, &e, t, &s, None, PosteriorVariance::Posterior).unwrap();
        let zero = LatentTensor::zeros([2, 2, 2]);
        let base = step(&zero);
        let lhs = step(&z1.axpby(a, &z2, 1.0).unwrap());
        let rhs = step(&z1).axpby(a, &step(&z2), 1.0).unwrap().axpby(1.0, &base, -a).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_is_pure(seed in 0u64..50) {
        let s = NoiseSchedule::from_betas(vec![0.05, 0.1, 0.2, 0.3]).unwrap();
        let plan = SamplingPlan::new(&s, 4, PosteriorVariance::Beta).unwrap();
        let (z_lr, priors, lr) = empty_cond_parts([1, 2, 2]);
        let cond = Conditioning { lr_latent: &z_lr, priors: &priors, lr_tokens: &lr };
        let p = Linear { b: 0.0 };
        let a = sample(&p, &cond, &Guidance::disabled(), &plan, seed).unwrap();
        let b = sample(&p, &cond, &Guidance::disabled(), &plan, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
