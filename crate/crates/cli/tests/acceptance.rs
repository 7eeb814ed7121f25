//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtpsr_core::config::RunConfig;
use dtpsr_core::dataset::caption::{CORRUPTION_TOKEN, HF_VOCABULARY, LF_VOCABULARY};
use dtpsr_core::dataset::{
    build_dataset, corrupt_captions, generate_record, load_manifest, load_records, DatasetConfig,
    MANIFEST_FILE,
};
use dtpsr_core::denoiser::{
    cross_attention_block, Branch, CrossAttentionParams, Denoiser, DenoiserConfig, TrainExample,
};
use dtpsr_core::diffusion::{
    forward_diffuse, make_schedule, Conditioning, LatentTensor, NoisePredictor,
};
use dtpsr_core::eval::{read_reports, MetricReport, ROBUSTNESS_DELTA_FILE};
use dtpsr_core::gradcheck::{check_gradients, randomize_params};
use dtpsr_core::guidance::{
    combine_guidance, guided_noise, Guidance, GuidanceSpec, DEFAULT_GUIDANCE_SCALE,
};
use dtpsr_core::imaging::RgbImage;
use dtpsr_core::metrics::{psnr, ssim};
use dtpsr_core::model::SrModel;
use dtpsr_core::pipeline::DemoReport;
use dtpsr_core::prior::{CaptionSet, Embeddings, LrFeatureTokens, PriorBundle};
use dtpsr_core::rng::normal_vec;
use dtpsr_core::tensor::Array;
use dtpsr_core::train::{eval_loss, prepare_items, Trainer};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn dtpsr(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dtpsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DTPSR_CONFIG")
        .output()
        .map_err(e2s)?;
    if !out.status.success() {
        return Err(format!(
            "dtpsr {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Small dataset plus an untrained checkpoint, shared by the CLI criteria.
struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    checkpoint: PathBuf,
    root: PathBuf,
}

const TINY: &[&str] = &[
    "--set",
    "denoiser.base_channels=8",
    "--set",
    "diffusion.sampling_steps=10",
];

fn fixture() -> Result<Fixture, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    dtpsr(
        &[
            &[
                "build-dataset",
                "--count",
                "3",
                "--out",
                p(&data),
                "--seed",
                "21",
            ],
            TINY,
        ]
        .concat(),
    )?;
    let run = root.join("run");
    let manifest = data.join(MANIFEST_FILE);
    dtpsr(
        &[
            &[
                "train",
                "--manifest",
                p(&manifest),
                "--out",
                p(&run),
                "--set",
                "train.iterations=0",
            ],
            TINY,
        ]
        .concat(),
    )?;
    Ok(Fixture {
        _dir: dir,
        manifest,
        checkpoint: run.join("final.json"),
        root,
    })
}

// 1 ------------------------------------------------------------------------

struct TwoWay<'a> {
    positive: &'a PriorBundle,
    eps: LatentTensor,
    eps_neg: LatentTensor,
}

impl NoisePredictor for TwoWay<'_> {
    fn predict_noise(
        &self,
        _: &LatentTensor,
        _: usize,
        cond: &Conditioning<'_>,
    ) -> dtpsr_core::Result<LatentTensor> {
        Ok(if std::ptr::eq(cond.priors, self.positive) {
            self.eps.clone()
        } else {
            self.eps_neg.clone()
        })
    }
}

fn cfg_algebra() -> Outcome {
    let start = Instant::now();
    ensure(DEFAULT_GUIDANCE_SCALE == 7.0, || {
        "default scale is not 7.0".into()
    })?;
    ensure(
        GuidanceSpec::default().lambda_s == 7.0 && RunConfig::default().guidance.lambda_s == 7.0,
        || "config default scale is not 7.0".into(),
    )?;
    let shape = [3, 4, 4];
    let z = LatentTensor::zeros(shape);
    let zl = LatentTensor::zeros(shape);
    let positive = PriorBundle::empty(2);
    let tokens = LrFeatureTokens::new(0, 2, vec![]).map_err(e2s)?;
    let cond = Conditioning {
        lr_latent: &zl,
        priors: &positive,
        lr_tokens: &tokens,
    };
    let mut worst = 0.0f64;
    for pair in 0..100u64 {
        let scale = 10f64.powi((pair % 7) as i32 - 3);
        let eps = LatentTensor::new(
            3,
            4,
            4,
            normal_vec(pair, 0, 48).iter().map(|v| v * scale).collect(),
        )
        .map_err(e2s)?;
        let eps_neg = LatentTensor::new(3, 4, 4, normal_vec(pair, 1, 48)).map_err(e2s)?;
        let net = TwoWay {
            positive: &positive,
            eps: eps.clone(),
            eps_neg: eps_neg.clone(),
        };
        for lambda in [0.0, 1.0, 7.0] {
            let guidance = Guidance::with_negative(lambda, PriorBundle::empty(2));
            let routes = [
                guided_noise(&net, &z, 5, &cond, &guidance).map_err(e2s)?,
                combine_guidance(&eps, &eps_neg, lambda).map_err(e2s)?,
            ];
            for out in routes {
                for ((o, a), b) in out.data().iter().zip(eps.data()).zip(eps_neg.data()) {
                    let expect = (1.0 + lambda) * a - lambda * b;
                    let magnitude = ((1.0 + lambda) * a).abs() + (lambda * b).abs();
                    worst = worst.max((o - expect).abs() / magnitude.max(f64::MIN_POSITIVE));
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max relative error {worst:e}"))?;
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "300 cases, max relative error {worst:.1e}, default scale 7.0, {took:.2?}"
    ))
}

// 2 ------------------------------------------------------------------------

fn forward_statistics() -> Outcome {
    let start = Instant::now();
    let s = make_schedule(1000, 1e-4, 0.02).map_err(e2s)?;
    let shape = [1, 1, 100_000];
    let z0 = LatentTensor::zeros(shape);
    let mut worst = 0.0f64;
    for t in [250, 500, 999] {
        let eps = LatentTensor::standard_normal(shape, 2024, t as u64);
        let zt = forward_diffuse(&z0, t, &eps, &s).map_err(e2s)?;
        let n = zt.len() as f64;
        let mean = zt.data().iter().sum::<f64>() / n;
        let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 1.0 - s.alpha_bars()[t];
        let rel = (var - expect).abs() / expect;
        ensure(rel < 0.02, || format!("t={t}: variance {var} vs {expect}"))?;
        worst = worst.max(rel);
    }
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!(
        "worst deviation {:.3}% at 1e5 samples, {took:.2?}",
        worst * 100.0
    ))
}

// 3 ------------------------------------------------------------------------

fn branch_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        depth: 1,
        embed_dim: 4,
        attention_heads: 2,
        latent_channels: 3,
        text_dim: 6,
        lr_token_dim: 5,
        time_dim: 8,
        ..DenoiserConfig::default()
    }
}

fn rows(dim: usize, n: usize, seed: u64) -> Embeddings {
    let data = normal_vec(seed, 7, dim * n);
    Embeddings::from_rows(dim, data.chunks(dim).map(<[f64]>::to_vec).collect()).expect("rows")
}

fn priors(dim: usize, n: usize, seed: u64) -> PriorBundle {
    PriorBundle {
        global: rows(dim, 1, seed),
        lf: rows(dim, n, seed + 1),
        hf: rows(dim, n, seed + 2),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn branch_identity() -> Outcome {
    let cfg = branch_config();
    let mut net = Denoiser::new(cfg.clone(), 1).map_err(e2s)?;
    randomize_params(net.params_mut(), 1, 1.0);
    // the zero-conditioning case needs the value bias at its zero init
    for (name, v) in net.params_mut().iter_mut() {
        if name.ends_with(".bv") {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let pri = priors(cfg.text_dim, 2, 3);
    let lr = LrFeatureTokens::new(4, cfg.lr_token_dim, normal_vec(4, 9, 4 * cfg.lr_token_dim))
        .map_err(e2s)?;
    let empty = PriorBundle::empty(cfg.text_dim);
    let no_tokens = LrFeatureTokens::new(0, cfg.lr_token_dim, vec![]).map_err(e2s)?;
    let zero_priors = PriorBundle {
        global: Embeddings::from_rows(cfg.text_dim, vec![vec![0.0; cfg.text_dim]]).map_err(e2s)?,
        lf: Embeddings::from_rows(cfg.text_dim, vec![vec![0.0; cfg.text_dim]; 2]).map_err(e2s)?,
        hf: Embeddings::from_rows(cfg.text_dim, vec![vec![0.0; cfg.text_dim]; 2]).map_err(e2s)?,
    };
    let zero_tokens =
        LrFeatureTokens::new(3, cfg.lr_token_dim, vec![0.0; 3 * cfg.lr_token_dim]).map_err(e2s)?;
    let mut checks = 0;
    for site in 0..2 {
        let c = cfg.base_channels << site;
        let feat = Array::from_vec(&[c, 4, 4], normal_vec(5, site as u64, c * 16)).map_err(e2s)?;
        for branch in Branch::ALL {
            let on = net
                .apply_branch(site, branch, &feat, &pri, &lr)
                .map_err(e2s)?;
            ensure(max_abs_diff(on.data(), feat.data()) > 0.0, || {
                format!("{branch:?} inert when enabled")
            })?;
            let mut off = cfg.clone();
            off.set_branch(branch, false);
            let off_net = net.with_config(off).map_err(e2s)?;
            let cases = [
                (
                    "disabled",
                    off_net.apply_branch(site, branch, &feat, &pri, &lr),
                ),
                (
                    "empty",
                    net.apply_branch(site, branch, &feat, &empty, &no_tokens),
                ),
                (
                    "zero",
                    net.apply_branch(site, branch, &feat, &zero_priors, &zero_tokens),
                ),
            ];
            for (what, out) in cases {
                let d = max_abs_diff(out.map_err(e2s)?.data(), feat.data());
                ensure(d == 0.0, || {
                    format!("{branch:?} {what} at site {site}: deviation {d:e}")
                })?;
                checks += 1;
            }
        }
    }
    // padding rows must not change anything
    let z = LatentTensor::standard_normal([3, 4, 4], 6, 0);
    let zl = LatentTensor::standard_normal([3, 4, 4], 6, 1);
    let mut padded = pri.clone();
    padded.pad_local_to(3);
    let cond = Conditioning {
        lr_latent: &zl,
        priors: &pri,
        lr_tokens: &lr,
    };
    let a = net.denoise_step(&z, 77, &cond).map_err(e2s)?;
    let b = net
        .denoise_step(&z, 77, &cond.with_priors(&padded))
        .map_err(e2s)?;
    let end_to_end = max_abs_diff(a.data(), b.data());
    let a = |shape: &[usize], stream: u64| {
        let n = shape.iter().product();
        Array::from_vec(shape, normal_vec(12, stream, n)).expect("shape")
    };
    let (c, x, d) = (4, cfg.text_dim, 4);
    let site_params = CrossAttentionParams {
        gamma: a(&[c], 0),
        beta: a(&[c], 1),
        wq: a(&[d, c], 2),
        wk: a(&[d, x], 3),
        wv: a(&[d, x], 4),
        bv: a(&[d], 5),
        wo: a(&[c, d], 6),
        gate: 0.7,
    };
    let feat = Array::from_vec(&[4, 2, 2], normal_vec(4, 0, 16)).map_err(e2s)?;
    let e = rows(cfg.text_dim, 2, 8);
    let mut e_pad = e.clone();
    e_pad.pad_to(5);
    let block = max_abs_diff(
        cross_attention_block(&site_params, 2, &feat, &e)
            .map_err(e2s)?
            .data(),
        cross_attention_block(&site_params, 2, &feat, &e_pad)
            .map_err(e2s)?
            .data(),
    );
    ensure(end_to_end <= 1e-12 && block <= 1e-12, || {
        format!("padding changed output: end-to-end {end_to_end:e}, block {block:e}")
    })?;
    Ok(format!(
        "{checks} identity cases exact, padding deviation {:.1e}",
        end_to_end.max(block)
    ))
}

// 4 ------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        base_channels: 2,
        depth: 1,
        embed_dim: 4,
        attention_heads: 2,
        latent_channels: 3,
        text_dim: 4,
        lr_token_dim: 3,
        time_dim: 4,
        ..DenoiserConfig::default()
    };
    let count = cfg.parameter_count();
    ensure(count <= 2000, || format!("{count} parameters"))?;
    let mut net = Denoiser::new(cfg.clone(), 10).map_err(e2s)?;
    randomize_params(net.params_mut(), 10, 1.0);
    let z0 = LatentTensor::standard_normal([3, 4, 4], 8, 0);
    let zl = LatentTensor::standard_normal([3, 4, 4], 8, 1);
    let eps = LatentTensor::standard_normal([3, 4, 4], 8, 2);
    let pri = priors(cfg.text_dim, 2, 8);
    let lr = LrFeatureTokens::new(4, cfg.lr_token_dim, normal_vec(8, 9, 4 * cfg.lr_token_dim))
        .map_err(e2s)?;
    let schedule = make_schedule(100, 1e-4, 0.02).map_err(e2s)?;
    let ex = TrainExample {
        z0: &z0,
        cond: Conditioning {
            lr_latent: &zl,
            priors: &pri,
            lr_tokens: &lr,
        },
        t: 37,
        eps: &eps,
    };
    let report = check_gradients(&net, &ex, &schedule, 1e-4, 1e-6).map_err(e2s)?;
    ensure(report.checked == count, || {
        format!("checked {} of {count}", report.checked)
    })?;
    ensure(report.max_rel_error < 1e-4, || format!("{report:?}"))?;
    let took = within(start, Duration::from_secs(120))?;
    Ok(format!(
        "{count} parameters, max relative error {:.1e}, {took:.1?}",
        report.max_rel_error
    ))
}

// 5 ------------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let summary = build_dataset(8, dir.path(), &DatasetConfig::default()).map_err(e2s)?;
    let records = load_records(&summary.manifest).map_err(e2s)?;
    ensure(records.len() == 8, || format!("{} records", records.len()))?;
    let mut cfg = RunConfig::default();
    cfg.denoiser.base_channels = 8;
    cfg.train.iterations = 2000;
    let model = SrModel::init(cfg).map_err(e2s)?;
    let items = prepare_items(&model, &records).map_err(e2s)?;
    let initial = eval_loss(&model, &items, 7, 4).map_err(e2s)?;
    let mut trainer = Trainer::new(model, items).map_err(e2s)?;
    while trainer.iteration() < 2000 {
        trainer.step().map_err(e2s)?;
    }
    let last = eval_loss(trainer.model(), trainer.items(), 7, 4).map_err(e2s)?;
    let ratio = last / initial;
    let model = trainer.into_model();
    let guidance = model.guidance().map_err(e2s)?;
    let mut scores = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let prepared = model.prepare(&r.lr, &r.record.captions()).map_err(e2s)?;
        let out = model.restore(&prepared, &guidance, i as u64).map_err(e2s)?;
        scores.push(psnr(&r.hr, &out).map_err(e2s)?.0);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let detail = format!("loss ratio {ratio:.4}, mean sample PSNR {mean:.2} dB");
    ensure(ratio < 0.1, || {
        format!("{detail}: loss did not fall below 10%")
    })?;
    ensure(mean >= 20.0, || format!("{detail}: PSNR below 20 dB"))?;
    let took = within(start, Duration::from_secs(15 * 60))?;
    Ok(format!("{detail}, {took:.0?}"))
}

// 6 ------------------------------------------------------------------------

fn ablate_twice(fx: &Fixture, grid: &str) -> Result<(Vec<MetricReport>, String), String> {
    let mut texts = Vec::new();
    for k in 0..2 {
        let out = fx.root.join(format!("{grid}-{k}"));
        dtpsr(
            &[
                &[
                    "ablate",
                    "--checkpoint",
                    p(&fx.checkpoint),
                    "--manifest",
                    p(&fx.manifest),
                    "--grid",
                    grid,
                    "--out",
                    p(&out),
                    "--seed",
                    "5",
                ],
                TINY,
            ]
            .concat(),
        )?;
        texts.push(fs::read_to_string(out.join(format!("{grid}.jsonl"))).map_err(e2s)?);
    }
    ensure(texts[0] == texts[1], || {
        format!("{grid} reports differ between runs")
    })?;
    let path = fx
        .root
        .join(format!("{grid}-0"))
        .join(format!("{grid}.jsonl"));
    let reports = read_reports(&path).map_err(e2s)?;
    let reserialized: Vec<String> = reports
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    let original: Vec<&str> = texts[0].lines().collect();
    ensure(reserialized == original, || {
        format!("{grid} reports do not round-trip")
    })?;
    Ok((
        reports,
        fx.root.join(format!("{grid}-0")).display().to_string(),
    ))
}

fn ablation_grids(fx: &Fixture) -> Outcome {
    let (t3, _) = ablate_twice(fx, "table3")?;
    let names: Vec<&str> = t3.iter().map(|r| r.meta.name.as_str()).collect();
    ensure(names == ["exp3-1", "exp3-2", "exp3-3", "exp3-4"], || {
        format!("table3 gave {names:?}")
    })?;
    let flags: Vec<(bool, bool, bool)> = t3
        .iter()
        .map(|r| {
            let b = &r.meta.branches;
            (b[&Branch::Gtca], b[&Branch::Lfca], b[&Branch::Hfca])
        })
        .collect();
    let expect = [
        (false, false, false),
        (false, true, true),
        (true, false, false),
        (true, true, true),
    ];
    ensure(flags == expect, || format!("table3 branch flags {flags:?}"))?;
    let (t6, _) = ablate_twice(fx, "table6")?;
    let modes: Vec<String> = t6
        .iter()
        .map(|r| {
            serde_json::to_value(r.meta.cfg_mode)
                .unwrap()
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    ensure(modes == ["none", "single", "multi"], || {
        format!("table6 gave {modes:?}")
    })?;
    ensure(t3.iter().chain(&t6).all(|r| r.images.len() == 3), || {
        "wrong image count".into()
    })?;
    Ok("table3 has 4 configurations, table6 has 3; reports parse, round-trip and repeat under --seed".into())
}

// 7 ------------------------------------------------------------------------

fn robustness(fx: &Fixture) -> Outcome {
    let sets = [
        CaptionSet {
            global: "a plain white background with 2 objects in a horizontal row".into(),
            lf: vec![
                "a large red circle oriented vertically".into(),
                "a small blue band oriented diagonally".into(),
            ],
            hf: vec![
                "smooth solid surface with crisp clean edges".into(),
                "fine striped pattern with crisp clean edges".into(),
            ],
        },
        CaptionSet {
            global: "one two three".into(),
            lf: vec![],
            hf: vec![],
        },
    ];
    let mut cases = 0;
    for set in &sets {
        for prob in [0.0, 0.3, 1.0] {
            for seed in 0..20u64 {
                let out = corrupt_captions(set, prob, seed);
                // replay oracle: one uniform draw per token, global then LF then HF
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut replay = |c: &str| -> String {
                    let toks: Vec<&str> = c.split_whitespace().collect();
                    let hits: Vec<bool> = toks.iter().map(|_| rng.random::<f64>() < prob).collect();
                    if hits.iter().any(|&h| h) {
                        toks.iter()
                            .zip(hits)
                            .map(|(t, h)| if h { CORRUPTION_TOKEN } else { t })
                            .collect::<Vec<_>>()
                            .join(" ")
                    } else {
                        c.to_string()
                    }
                };
                let expect = CaptionSet {
                    global: replay(&set.global),
                    lf: set.lf.iter().map(|c| replay(c)).collect(),
                    hf: set.hf.iter().map(|c| replay(c)).collect(),
                };
                ensure(out == expect, || format!("p={prob} seed={seed}: {out:?}"))?;
                if prob == 0.0 {
                    ensure(out == *set, || "p=0 changed captions".into())?;
                }
                if prob == 1.0 {
                    let all = std::iter::once(&out.global).chain(&out.lf).chain(&out.hf);
                    ensure(
                        all.flat_map(|c| c.split(' '))
                            .all(|t| t == CORRUPTION_TOKEN),
                        || "p=1 left a token".into(),
                    )?;
                }
                cases += 1;
            }
        }
    }
    let out = fx.root.join("robust");
    dtpsr(
        &[
            &[
                "ablate",
                "--checkpoint",
                p(&fx.checkpoint),
                "--manifest",
                p(&fx.manifest),
                "--grid",
                "robustness",
                "--out",
                p(&out),
            ],
            TINY,
        ]
        .concat(),
    )?;
    let reports = read_reports(&out.join("robustness.jsonl")).map_err(e2s)?;
    let pairs: Vec<(&str, f64)> = reports
        .iter()
        .map(|r| (r.meta.name.as_str(), r.meta.corruption_p))
        .collect();
    ensure(pairs == [("dtpsr", 0.0), ("dtpsr-c", 0.3)], || {
        format!("robustness reports {pairs:?}")
    })?;
    let ids: HashSet<Vec<&str>> = reports
        .iter()
        .map(|r| r.images.iter().map(|s| s.record_id.as_str()).collect())
        .collect();
    ensure(ids.len() == 1, || "reports cover different records".into())?;
    let delta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(ROBUSTNESS_DELTA_FILE)).map_err(e2s)?)
            .map_err(e2s)?;
    ensure(delta["corruption_p"] == 0.3, || format!("delta {delta}"))?;
    Ok(format!("{cases} corruption cases match the replay oracle; paired clean/corrupted reports from one command"))
}

// 8 ------------------------------------------------------------------------

fn brute_luma(img: &RgbImage, x: usize, y: usize) -> f64 {
    0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
}

fn brute_psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mut sse = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let d = brute_luma(a, x, y) - brute_luma(b, x, y);
            sse += d * d;
        }
    }
    let mse = sse / (a.width() * a.height()) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * 255.0f64.log10() - 10.0 * mse.log10()
    }
}

fn brute_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let (c1, c2) = (6.5025, 58.5225);
    let mut total = 0.0;
    let mut count = 0.0;
    for y0 in 0..=a.height() - 8 {
        for x0 in 0..=a.width() - 8 {
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    pa.push(brute_luma(a, x, y));
                    pb.push(brute_luma(b, x, y));
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / 64.0;
            let (ma, mb) = (mean(&pa), mean(&pb));
            let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = pa
                .iter()
                .zip(&pb)
                .map(|(u, v)| (u - ma) * (v - mb))
                .sum::<f64>()
                / 64.0;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(8..24), rng.random_range(8..24));
        let a: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let noise = rng.random_range(1..80i32);
        let b: Vec<u8> = a
            .iter()
            .map(|&v| (v as i32 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8)
            .collect();
        let (a, b) = (
            RgbImage::from_u8(w, h, &a).map_err(e2s)?,
            RgbImage::from_u8(w, h, &b).map_err(e2s)?,
        );
        dp = dp.max((psnr(&a, &b).map_err(e2s)?.0 - brute_psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).map_err(e2s)? - brute_ssim(&a, &b)).abs());
    }
    ensure(dp <= 1e-9 && ds <= 1e-6, || {
        format!("psnr deviation {dp:e}, ssim deviation {ds:e}")
    })?;
    let img = RgbImage::from_u8(9, 9, &[77; 243]).map_err(e2s)?;
    ensure(psnr(&img, &img).map_err(e2s)?.is_infinite(), || {
        "identical psnr is finite".into()
    })?;
    ensure(ssim(&img, &img).map_err(e2s)? == 1.0, || {
        "identical ssim is not 1".into()
    })?;
    Ok(format!("50 pairs, psnr deviation {dp:.1e}, ssim deviation {ds:.1e}; identical images give inf and 1.0"))
}

// 9 ------------------------------------------------------------------------

fn tree_bytes(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(e2s)? {
            let path = entry.map_err(e2s)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).map_err(e2s)?);
            }
        }
    }
    Ok(out)
}

fn dataset_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        dtpsr(&[
            "build-dataset",
            "--count",
            "200",
            "--out",
            p(out),
            "--seed",
            "9",
        ])?;
    }
    let (ta, tb) = (tree_bytes(&a)?, tree_bytes(&b)?);
    ensure(ta.len() == 401, || format!("{} files written", ta.len()))?;
    ensure(ta == tb, || "rebuild is not byte-identical".into())?;
    let records = load_manifest(&a.join(MANIFEST_FILE)).map_err(e2s)?;
    ensure(records.len() == 200, || {
        format!("{} records", records.len())
    })?;
    let cfg = DatasetConfig {
        seed: 9,
        ..DatasetConfig::default()
    };
    let lf_vocab: HashSet<&str> = LF_VOCABULARY.iter().copied().collect();
    let hf_vocab: HashSet<&str> = HF_VOCABULARY.iter().copied().collect();
    ensure(lf_vocab.is_disjoint(&hf_vocab), || {
        "vocabularies overlap".into()
    })?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(e2s)?;
        ensure(
            r.lf.len() <= 3 && r.hf.len() <= 3 && r.lf.len() == r.hf.len(),
            || {
                format!(
                    "{}: {} LF / {} HF captions",
                    r.record_id,
                    r.lf.len(),
                    r.hf.len()
                )
            },
        )?;
        ensure(
            r.lf.iter()
                .flat_map(|c| c.split_whitespace())
                .all(|w| lf_vocab.contains(w)),
            || format!("{}: LF caption outside vocabulary", r.record_id),
        )?;
        ensure(
            r.hf.iter()
                .flat_map(|c| c.split_whitespace())
                .all(|w| hf_vocab.contains(w)),
            || format!("{}: HF caption outside vocabulary", r.record_id),
        )?;
        ensure(r.seed == cfg.record_seed(i), || {
            format!("{}: unexpected seed", r.record_id)
        })?;
        // regenerate the segmentation and check the stored areas against disjoint masks
        let g = generate_record(&cfg, r.seed).map_err(e2s)?;
        let mut owner = vec![false; g.hr.width() * g.hr.height()];
        for region in &g.regions {
            for (o, &m) in owner.iter_mut().zip(&region.mask) {
                ensure(!(m && *o), || format!("{}: overlapping masks", r.record_id))?;
                *o |= m;
            }
        }
        let areas: Vec<usize> = g.regions.iter().map(|s| s.area).collect();
        ensure(areas == r.areas, || {
            format!("{}: areas {:?} vs {:?}", r.record_id, areas, r.areas)
        })?;
    }
    Ok("200 records valid, masks disjoint, vocabularies disjoint, at most 3 captions per band, rebuild byte-identical".into())
}

// 10 -----------------------------------------------------------------------

fn demo(fx: &Fixture) -> Outcome {
    let mut trees = Vec::new();
    for k in 0..2 {
        let out = fx.root.join(format!("demo-{k}"));
        dtpsr(
            &[
                &[
                    "demo",
                    "--checkpoint",
                    p(&fx.checkpoint),
                    "--out",
                    p(&out),
                    "--seed",
                    "11",
                ],
                TINY,
            ]
            .concat(),
        )?;
        trees.push(tree_bytes(&out)?);
    }
    ensure(trees[0] == trees[1], || {
        "demo output differs between runs".into()
    })?;
    let names: Vec<String> = trees[0].keys().map(|k| k.display().to_string()).collect();
    let report: DemoReport =
        serde_json::from_slice(&trees[0][Path::new("report.json")]).map_err(e2s)?;
    let mut expected = report.artifacts.clone();
    expected.sort();
    ensure(names == expected, || {
        format!("artifacts {names:?} vs report {expected:?}")
    })?;
    for needed in ["lr.png", "restored.png", "hr.png", "report.json"] {
        ensure(names.iter().any(|n| n == needed), || {
            format!("missing {needed}")
        })?;
    }
    let c = &report.captions;
    ensure(
        !c.global.is_empty() && c.lf.len() <= 3 && c.hf.len() <= 3,
        || format!("captions {c:?}"),
    )?;
    ensure(
        report.hr_size == [report.lr_size[0] * 4, report.lr_size[1] * 4],
        || format!("sizes {:?} -> {:?}", report.lr_size, report.hr_size),
    )?;
    let restored = RgbImage::load_png(&fx.root.join("demo-0/restored.png")).map_err(e2s)?;
    ensure(
        [restored.width(), restored.height()] == report.hr_size,
        || "restored size".into(),
    )?;
    Ok(format!(
        "{} artifacts, {} LF / {} HF captions, {:?} -> {:?}, identical across runs",
        names.len(),
        c.lf.len(),
        c.hf.len(),
        report.lr_size,
        report.hr_size
    ))
}

fn main() {
    let fx = fixture();
    let with_fixture = |f: fn(&Fixture) -> Outcome| -> Outcome {
        match &fx {
            Ok(fx) => f(fx),
            Err(e) => Err(format!("fixture failed: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("CFG algebra", cfg_algebra()),
        ("forward-diffusion statistics", forward_statistics()),
        ("branch identity", branch_identity()),
        ("gradient check", gradient_check()),
        ("overfit", overfit()),
        ("ablation-grid structure", with_fixture(ablation_grids)),
        ("robustness protocol", with_fixture(robustness)),
        ("metric oracles", metric_oracles()),
        ("dataset integrity", dataset_integrity()),
        ("end-to-end demo", with_fixture(demo)),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
