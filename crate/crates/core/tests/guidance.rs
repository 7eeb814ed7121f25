use dtpsr_core::diffusion::{
    make_schedule, sample, Conditioning, LatentTensor, NoisePredictor, PosteriorVariance,
    SamplingPlan,
};
use dtpsr_core::guidance::{
    combine_guidance, guided_noise, CfgMode, CountingPredictor, Guidance, GuidanceSpec,
    DEFAULT_NEG_GLOBAL,
};
use dtpsr_core::prior::{
    Embeddings, HashTextEncoder, LrFeatureTokens, PriorBundle, TextGranularity,
};
use dtpsr_core::Result;

/// Returns `pos` when called with the positive bundle and `neg` otherwise.
struct TwoFaced<'a> {
    positive: &'a PriorBundle,
    pos: LatentTensor,
    neg: LatentTensor,
}

impl NoisePredictor for TwoFaced<'_> {
    fn predict_noise(
        &self,
        _: &LatentTensor,
        _: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        Ok(if cond.priors == self.positive {
            self.pos.clone()
        } else {
            self.neg.clone()
        })
    }
}

/// Prediction depends on the priors through their summed entries.
struct PriorSensitive;

impl NoisePredictor for PriorSensitive {
    fn predict_noise(
        &self,
        z: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        let p = cond.priors;
        let s: f64 = [&p.global, &p.lf, &p.hf]
            .iter()
            .enumerate()
            .map(|(i, e)| (i + 1) as f64 * e.data().iter().sum::<f64>())
            .sum();
        z.axpby(0.01 * t as f64, &LatentTensor::filled(z.shape(), s), 1.0)
    }
}

fn one_row(v: f64) -> Embeddings {
    Embeddings::from_rows(2, vec![vec![v, -v]]).unwrap()
}

#[test]
fn guided_noise_is_affine_on_random_pairs() {
    let positive = PriorBundle {
        global: one_row(1.0),
        lf: one_row(2.0),
        hf: one_row(3.0),
    };
    let negative = PriorBundle::empty(2);
    let z = LatentTensor::zeros([3, 4, 4]);
    let zl = z.clone();
    let lr = LrFeatureTokens::new(0, 2, vec![]).unwrap();
    let cond = Conditioning {
        lr_latent: &zl,
        priors: &positive,
        lr_tokens: &lr,
    };
    let mut worst: f64 = 0.0;
    for pair in 0..100u64 {
        let pred = TwoFaced {
            positive: &positive,
            pos: LatentTensor::standard_normal([3, 4, 4], pair, 0),
            neg: LatentTensor::standard_normal([3, 4, 4], pair, 1),
        };
        for lambda in [0.0, 1.0, 7.0] {
            let g = guided_noise(
                &pred,
                &z,
                10,
                &cond,
                &Guidance::with_negative(lambda, negative.clone()),
            )
            .unwrap();
            for i in 0..g.len() {
                let (p, n) = (pred.pos.data()[i], pred.neg.data()[i]);
                let expect = (1.0 + lambda) * p - lambda * n;
                // relative to the magnitude of the summed terms
                let scale = ((1.0 + lambda) * p.abs() + lambda * n.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max((g.data()[i] - expect).abs() / scale);
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn mode_none_makes_one_call_and_guided_modes_two() {
    let enc = HashTextEncoder::new(2).unwrap();
    let positive = PriorBundle::empty(2);
    let z = LatentTensor::filled([1, 2, 2], 0.5);
    let lr = LrFeatureTokens::new(0, 2, vec![]).unwrap();
    let cond = Conditioning {
        lr_latent: &z,
        priors: &positive,
        lr_tokens: &lr,
    };
    let inner = PriorSensitive;
    let counter = CountingPredictor::new(&inner);
    for (mode, calls) in [
        (CfgMode::None, 1),
        (CfgMode::Single, 2),
        (CfgMode::Multi, 2),
    ] {
        let spec = GuidanceSpec {
            mode,
            ..GuidanceSpec::default()
        };
        let g = spec.resolve(&enc, TextGranularity::Pooled).unwrap();
        counter.reset();
        guided_noise(&counter, &z, 3, &cond, &g).unwrap();
        assert_eq!(counter.calls(), calls, "{mode:?}");
    }
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let plan = SamplingPlan::new(&s, 5, PosteriorVariance::Posterior).unwrap();
    let none = GuidanceSpec::none()
        .resolve(&enc, TextGranularity::Pooled)
        .unwrap();
    counter.reset();
    sample(&counter, &cond, &none, &plan, 1).unwrap();
    assert_eq!(counter.calls(), 5);
    let multi = GuidanceSpec::default()
        .resolve(&enc, TextGranularity::Pooled)
        .unwrap();
    counter.reset();
    sample(&counter, &cond, &multi, &plan, 1).unwrap();
    assert_eq!(counter.calls(), 10);
}

#[test]
fn single_equals_multi_with_shared_negative() {
    let enc = HashTextEncoder::new(8).unwrap();
    for granularity in [TextGranularity::Pooled, TextGranularity::Tokens] {
        let single = GuidanceSpec {
            mode: CfgMode::Single,
            ..GuidanceSpec::default()
        }
        .resolve(&enc, granularity)
        .unwrap();
        let multi = GuidanceSpec {
            mode: CfgMode::Multi,
            neg_lf: vec![DEFAULT_NEG_GLOBAL.to_string()],
            neg_hf: vec![DEFAULT_NEG_GLOBAL.to_string()],
            ..GuidanceSpec::default()
        }
        .resolve(&enc, granularity)
        .unwrap();
        assert_eq!(single, multi);
        let default_multi = GuidanceSpec::default().resolve(&enc, granularity).unwrap();
        assert_ne!(single, default_multi);
    }
}

#[test]
fn mode_none_ignores_negatives_and_scale() {
    let enc = HashTextEncoder::new(4).unwrap();
    let spec = GuidanceSpec {
        mode: CfgMode::None,
        lambda_s: 3.0,
        neg_global: "anything".into(),
        neg_lf: vec![],
        neg_hf: vec!["x".into(), "y".into()],
    };
    assert!(spec
        .resolve(&enc, TextGranularity::Pooled)
        .unwrap()
        .negative
        .is_none());
}

#[test]
fn mismatched_predictions_are_errors() {
    struct Wrong;
    impl NoisePredictor for Wrong {
        fn predict_noise(
            &self,
            z: &LatentTensor,
            _: usize,
            _: &Conditioning<'_>,
        ) -> Result<LatentTensor> {
            Ok(LatentTensor::zeros([
                z.shape()[0] + 1,
                z.shape()[1],
                z.shape()[2],
            ]))
        }
    }
    let z = LatentTensor::zeros([1, 2, 2]);
    let p = PriorBundle::empty(2);
    let lr = LrFeatureTokens::new(0, 2, vec![]).unwrap();
    let cond = Conditioning {
        lr_latent: &z,
        priors: &p,
        lr_tokens: &lr,
    };
    let g = Guidance::with_negative(1.0, PriorBundle::empty(2));
    assert!(guided_noise(&Wrong, &z, 0, &cond, &g).is_err());
    assert!(combine_guidance(&z, &LatentTensor::zeros([2, 2, 2]), 1.0).is_err());
}
