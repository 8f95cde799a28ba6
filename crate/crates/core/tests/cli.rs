use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pointar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointar"))
        .current_dir(dir)
        .env_remove("POINTAR_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen-data", "--count", "10", "--points", "128", "--out", name];
    args.extend_from_slice(extra);
    let o = pointar(dir, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointar(
        dir.path(),
        &[
            "gen-data",
            "--count",
            "10",
            "--splits",
            "0.5,0.25,0.25",
            "--out",
            "u.pgpt",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "two records per class cannot fill three splits"
    );
    gen(
        dir.path(),
        "a.pgpt",
        &["--count", "20", "--seed", "4", "--splits", "0.5,0.25,0.25"],
    );
    gen(
        dir.path(),
        "b.pgpt",
        &["--count", "20", "--seed", "4", "--splits", "0.5,0.25,0.25"],
    );
    gen(
        dir.path(),
        "c.pgpt",
        &["--count", "20", "--seed", "5", "--splits", "0.5,0.25,0.25"],
    );
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.pgpt"), read("b.pgpt"));
    assert_eq!(read("a.manifest"), read("b.manifest"));
    assert_ne!(read("a.pgpt"), read("c.pgpt"));
}

#[test]
fn empty_dataset_is_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointar(dir.path(), &["gen-data", "--count", "0", "--out", "e.pgpt"]);
    assert!(o.status.success());
    assert!(dir.path().join("e.pgpt").exists());
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        pointar(dir.path(), &["inspect", "--what", "colour"]).status.code(),
        Some(1)
    );
    assert_eq!(pointar(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let o = pointar(
        dir.path(),
        &["eval", "--data", "missing.pgpt", "--checkpoint", "x.ckpt"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("x.ckpt"));
    fs::write(dir.path().join("junk.pgpt"), b"not a dataset").unwrap();
    let o = pointar(dir.path(), &["inspect", "--what", "morton", "--input", "junk.pgpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn causal_mask_grid_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointar(dir.path(), &["inspect", "--what", "mask", "--n", "4", "--ratio", "0"]);
    assert_eq!(stdout(&o), "1...\n11..\n111.\n1111\n");
    // ratio 0.7 on 4 rows keeps 1, 2, 2, 2 positions
    let o = pointar(dir.path(), &["inspect", "--what", "mask", "--n", "4", "--seed", "9"]);
    let ones: Vec<usize> = stdout(&o).lines().map(|l| l.matches('1').count()).collect();
    assert_eq!(ones, [1, 2, 2, 2]);
}

#[test]
fn inspect_lists_one_line_per_center() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.pgpt", &[]);
    let o = pointar(
        dir.path(),
        &[
            "inspect",
            "--what",
            "morton",
            "--input",
            "d.pgpt",
            "--patches",
            "2",
            "--patch-size",
            "8",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    let o = pointar(
        dir.path(),
        &["inspect", "--what", "rdp", "--input", "d.pgpt", "--preset", "tiny"],
    );
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn outdir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pointar"))
        .current_dir(dir.path())
        .env("POINTAR_OUT", "from_env")
        .args(["inspect", "--what", "mask", "--n", "2"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = fs::read_to_string(dir.path().join("from_env/config.resolved")).unwrap();
    assert!(resolved.starts_with("command = inspect\n"), "{resolved}");
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# mask settings\nn = 5\nratio = 0.5\nseed = 3\n",
    )
    .unwrap();
    let o = pointar(
        dir.path(),
        &["inspect", "--what", "mask", "--config", "run.cfg", "--n", "3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    let resolved = fs::read_to_string(dir.path().join("out/config.resolved")).unwrap();
    assert!(resolved.contains("n = 3\n"), "{resolved}");
    assert!(resolved.contains("ratio = 0.5\n"), "{resolved}");

    fs::write(dir.path().join("bad.cfg"), "no_such_flag = 1\n").unwrap();
    let o = pointar(dir.path(), &["inspect", "--what", "mask", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&pointar(dir.path(), &["pretrain", "--help"]));
    assert!(help.contains("[default: 0.7]"), "{help}");
    assert!(help.contains("POINTAR_OUT"), "{help}");
}

#[test]
fn corrupted_gradient_fails_with_numeric_exit() {
    let dir = tempfile::tempdir().unwrap();
    let ok = pointar(dir.path(), &["gradcheck", "--max-entries", "8"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).starts_with("primitive"));
    let bad = pointar(dir.path(), &["gradcheck", "--max-entries", "8", "--corrupt", "relu"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("relu"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "a.pgpt", &["--pool", "A", "--count", "20"]);
    gen(
        p,
        "b.pgpt",
        &["--pool", "B", "--count", "20", "--splits", "0.5,0.25,0.25"],
    );
    let tiny = ["--preset", "tiny", "--batch-size", "5"];
    let run = |args: &[&str]| {
        let o = pointar(p, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let pre = run(&[
        &[
            "pretrain",
            "--data",
            "a.pgpt",
            "--epochs",
            "2",
            "--checkpoint-every",
            "1",
        ][..],
        &tiny,
    ]
    .concat());
    assert!(pre.contains("final_loss="), "{pre}");
    assert!(p.join("out/pretrain_epoch001.ckpt").exists());
    fs::copy(p.join("out/pretrain.ckpt"), p.join("pre.ckpt")).unwrap();
    let ft = run(&[
        &[
            "finetune",
            "--data",
            "b.pgpt",
            "--checkpoint",
            "pre.ckpt",
            "--epochs",
            "2",
        ][..],
        &tiny,
    ]
    .concat());
    assert!(ft.contains("accuracy="), "{ft}");
    let ev = run(&[
        "eval",
        "--data",
        "b.pgpt",
        "--checkpoint",
        "out/finetune.ckpt",
        "--split",
        "test",
    ]);
    assert!(ev.starts_with("accuracy="), "{ev}");
    let csv = fs::read_to_string(p.join("out/eval.csv")).unwrap();
    assert!(csv.starts_with("class,name,count,correct,accuracy\n"));
    let fs_out = run(&[
        "few-shot",
        "--data",
        "b.pgpt",
        "--checkpoint",
        "pre.ckpt",
        "--ways",
        "2",
        "--shots",
        "2",
        "--queries",
        "2",
        "--trials",
        "2",
        "--head-steps",
        "5",
    ]);
    assert!(fs_out.contains('±'), "{fs_out}");

    // a fine-tune checkpoint is not a pre-training one
    let o = pointar(
        p,
        &[
            "finetune",
            "--data",
            "b.pgpt",
            "--checkpoint",
            "out/finetune.ckpt",
            "--epochs",
            "1",
        ],
    );
    assert_eq!(o.status.code(), Some(2));

    // resuming from epoch 1 reproduces the two-epoch run
    let resumed = run(&[
        &[
            "pretrain",
            "--data",
            "a.pgpt",
            "--epochs",
            "2",
            "--resume",
            "out/pretrain_epoch001.ckpt",
        ][..],
        &tiny,
    ]
    .concat());
    assert_eq!(resumed, pre);
    assert_eq!(
        fs::read(p.join("out/pretrain.ckpt")).unwrap(),
        fs::read(p.join("pre.ckpt")).unwrap()
    );
}
