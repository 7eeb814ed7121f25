use std::path::Path;
use std::process::{Command, Output};

use dtpsr_core::config::RunConfig;
use dtpsr_core::imaging::RgbImage;

const SMALL: &[&str] = &[
    "--set",
    "dataset.image_size=32",
    "--set",
    "denoiser.base_channels=4",
    "--set",
    "diffusion.sampling_steps=3",
];

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtpsr"));
    cmd.args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DTPSR_CONFIG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args, &[]);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn show_config_round_trips_and_layers() {
    let text = ok(&["show-config"]);
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "[train]\nbatch_size = 4\nlearning_rate = 0.01\n").unwrap();
    let out = run(
        &[
            "show-config",
            "--config",
            s(&file),
            "--set",
            "train.batch_size=2",
        ],
        &[
            ("DTPSR_TRAIN_LEARNING_RATE", "0.5"),
            ("DTPSR_TRAIN_ITERATIONS", "9"),
        ],
    );
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.batch_size, 2);
    assert_eq!(cfg.train.learning_rate, 0.5);
    assert_eq!(cfg.train.iterations, 9);

    let env_file = run(&["show-config"], &[("DTPSR_CONFIG", s(&file))]);
    let cfg = RunConfig::from_toml(&String::from_utf8(env_file.stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.batch_size, 4);

    let cfg = RunConfig::from_toml(&ok(&[
        "show-config",
        "--cfg-mode",
        "single",
        "--lambda-s",
        "2.5",
        "--seed",
        "8",
    ]))
    .unwrap();
    assert_eq!(cfg.guidance.lambda_s, 2.5);
    assert_eq!((cfg.dataset.seed, cfg.train.seed, cfg.eval.seed), (8, 8, 8));
}

#[test]
fn exit_codes() {
    for bad in [
        vec!["show-config", "--set", "train.batch_size=0"],
        vec!["show-config", "--set", "train.no_such_field=1"],
        vec!["show-config", "--cfg-mode", "double"],
        vec!["no-such-command"],
    ] {
        assert_eq!(run(&bad, &[]).status.code(), Some(1), "{bad:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(
        &["demo", "--checkpoint", s(&missing), "--out", s(dir.path())],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn dataset_train_sample_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        &[
            "build-dataset",
            "--count",
            "2",
            "--out",
            s(&data),
            "--seed",
            "3",
        ],
        SMALL,
    ]
    .concat());
    let manifest = data.join("manifest.jsonl");
    let run_dir = dir.path().join("run");
    ok(&[
        &[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&run_dir),
            "--set",
            "train.iterations=2",
            "--set",
            "train.batch_size=2",
        ],
        SMALL,
    ]
    .concat());
    let ckpt = run_dir.join("final.json");
    assert!(run_dir.join("loss.jsonl").exists());

    let rec: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(&manifest)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let id = rec["record_id"].as_str().unwrap();
    let outs: Vec<Vec<u8>> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("hr{k}.png"));
            ok(&[
                &[
                    "sample",
                    "--checkpoint",
                    s(&ckpt),
                    "--manifest",
                    s(&manifest),
                    "--record",
                    id,
                    "--out",
                    s(&out),
                    "--seed",
                    "4",
                    "--cfg-mode",
                    "none",
                ],
                SMALL,
            ]
            .concat());
            std::fs::read(&out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let img = RgbImage::load_png(&dir.path().join("hr0.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    // captions from a JSON file and an LR image of the wrong size
    let caps = dir.path().join("caps.json");
    std::fs::write(
        &caps,
        r#"{"global": "a plain red background with 0 objects", "lf": [], "hf": []}"#,
    )
    .unwrap();
    let hr_path = data.join(rec["hr_path"].as_str().unwrap());
    let out = run(
        &[
            &[
                "sample",
                "--checkpoint",
                s(&ckpt),
                "--lr",
                s(&hr_path),
                "--captions",
                s(&caps),
                "--out",
                s(&dir.path().join("x.png")),
            ],
            SMALL,
        ]
        .concat(),
        &[],
    );
    assert_eq!(out.status.code(), Some(1));

    let eval_dir = dir.path().join("eval");
    let text = ok(&[
        &[
            "evaluate",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--out",
            s(&eval_dir),
        ],
        SMALL,
    ]
    .concat());
    assert!(text.contains("2 images"));
    assert!(eval_dir.join("evaluation.jsonl").exists());
}
