use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: [&str; 8] = [
    "--set",
    "train.updates=50",
    "--set",
    "train.batch_size=32",
    "--set",
    "model.hidden_dims=[8]",
    "--set",
    "eval.count=200",
];

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&run(
            d,
            &["train", "--out", "m.ckpt", "--set", "train.updatez=1"]
        )),
        2
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "train",
                "--out",
                "m.ckpt",
                "--set",
                "distill.step_divisor=3"
            ]
        )),
        2
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "train",
                "--out",
                "m.ckpt",
                "--set",
                "model.parameterization=eps",
                "--discrete-grid",
                "8"
            ]
        )),
        2
    );
    assert_eq!(
        code(&run(
            d,
            &["sample", "--checkpoint", "missing.ckpt", "--out", "s.csv"]
        )),
        1
    );
    let diverged = run(
        d,
        &[
            "train",
            "--out",
            "m.ckpt",
            "--set",
            "train.lr=1e300",
            "--set",
            "train.clip_norm=1e308",
            "--set",
            "train.updates=20",
            "--set",
            "model.hidden_dims=[8]",
        ],
    );
    assert_eq!(
        code(&diverged),
        3,
        "{}",
        String::from_utf8_lossy(&diverged.stderr)
    );
    assert!(!d.join("m.ckpt").exists());
    let bad_flag = run(
        d,
        &[
            "sample",
            "--sampler",
            "heun",
            "--checkpoint",
            "x",
            "--out",
            "y",
        ],
    );
    assert_ne!(code(&bad_flag), 0);
}

#[test]
fn config_command_prints_shipped_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["config"]);
    assert_eq!(code(&out), 0);
    let shipped =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json"))
            .unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), shipped);
}

#[test]
fn train_sample_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--out", "runs/base.ckpt"];
    args.extend(TINY);
    assert_eq!(code(&run(d, &args)), 0);
    let curve = std::fs::read_to_string(d.join("runs/base.ckpt.loss.csv")).unwrap();
    assert!(curve.starts_with("update,raw_loss,ema_eval_metric\n"));
    assert_eq!(curve.lines().count(), 51);

    assert_eq!(
        code(&run(
            d,
            &[
                "sample",
                "--checkpoint",
                "runs/base.ckpt",
                "--steps",
                "4",
                "--count",
                "5",
                "--out",
                "s.csv"
            ]
        )),
        0
    );
    let samples = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(samples.starts_with("sample_index,dim_0,dim_1\n"));
    assert_eq!(samples.lines().count(), 6);

    let mut eval = vec![
        "eval",
        "--checkpoint",
        "runs/base.ckpt",
        "--steps",
        "4",
        "--out",
        "m.csv",
    ];
    eval.extend(TINY);
    assert_eq!(code(&run(d, &eval)), 0);
    eval[4] = "8";
    assert_eq!(code(&run(d, &eval)), 0);
    let metrics = std::fs::read_to_string(d.join("m.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "sampler,n_steps,energy_distance,w1,agreement");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("ddim,4,") && lines[2].starts_with("ddim,8,"));

    // a 1-d dataset cannot score a 2-d model
    let mut wrong = vec![
        "eval",
        "--checkpoint",
        "runs/base.ckpt",
        "--dataset",
        "gauss1d:0,1",
        "--out",
        "m.csv",
    ];
    wrong.extend(TINY);
    assert_eq!(code(&run(d, &wrong)), 2);
}

#[test]
fn weight_curves_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "weights",
            "--lambda-min",
            "-4",
            "--lambda-max",
            "4",
            "--points",
            "9",
            "--out",
            "w.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert_eq!(
        code(&run(
            dir.path(),
            &["weights", "--points", "1", "--out", "w.csv"]
        )),
        2
    );
}
