use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsre::corpus::{generate_synthetic, SyntheticConfig};
use dsre::trainer::init_params;
use dsre::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dsre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsre")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dsre(args);
    assert!(
        out.status.success(),
        "dsre {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = dsre(args);
    assert!(!out.status.success(), "dsre {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: &[&str] = &[
    "--train-bags",
    "120",
    "--test-bags",
    "40",
    "--d-w",
    "8",
    "--d-p",
    "2",
    "--d-model",
    "12",
    "--heads",
    "4",
    "--batch-size",
    "20",
];

fn train_small(dir: &Path, seed: &str, epochs: &str) -> PathBuf {
    let mut args = vec![
        "train",
        "--data",
        "synth",
        "--seed",
        seed,
        "--epochs",
        epochs,
        "--out-dir",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    dir.join("model.ckpt")
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn write_sentences(dir: &Path, lines: &[&str]) -> String {
    let path = dir.join("input.txt");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_and_eval_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let ckpt = train_small(dir, "7", "2");
        ok(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "synth",
            "--ns",
            "10,50",
            "--seed",
            "3",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
    }
    for file in [
        "loss.tsv",
        "model.ckpt",
        "config.txt",
        "pr_curve.tsv",
        "pr_curve_1000.tsv",
        "pn.tsv",
    ] {
        assert_eq!(read(a.join(file)), read(b.join(file)), "{file} differs");
    }
    assert_eq!(String::from_utf8(read(a.join("loss.tsv"))).unwrap().lines().count(), 2);

    let c = tmp.path().join("c");
    train_small(&c, "8", "2");
    assert_ne!(read(a.join("model.ckpt")), read(c.join("model.ckpt")));
}

#[test]
fn eval_prints_the_report_it_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path(), "1", "1");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synth",
        "--ns",
        "10,20",
        "--settings",
        "one,all",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    let pn = String::from_utf8(read(tmp.path().join("pn.tsv"))).unwrap();
    let printed: Vec<&str> = stdout.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(printed, pn.lines().collect::<Vec<_>>());
    assert_eq!(printed.len(), 6);
    assert!(printed[0].starts_with("one\t10\t"));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path(), "5", "0");
    let ckpt = dsre::load_checkpoint(ckpt).unwrap();
    assert_eq!(ckpt.epoch, 0);
    assert!(read(tmp.path().join("loss.tsv")).is_empty());

    let config = TrainConfig {
        d_w: 8,
        d_p: 2,
        d_model: Some(12),
        heads: 4,
        batch_size: 20,
        seed: 5,
        epochs: 0,
        ..Default::default()
    };
    assert_eq!(ckpt.config, config);
    let sc = SyntheticConfig {
        train_bags: 120,
        test_bags: 40,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = generate_synthetic(&sc, &mut rng).unwrap();
    let model = init_params(&config, data.vocab.len(), data.labels, None, &mut rng).unwrap();
    for (a, b) in ckpt.model.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nlr = 0.1\nd_w = 6 # words\nepochs = 1\n").unwrap();
    let out = tmp.path().join("out");
    ok(&[
        "train",
        "--data",
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--lr",
        "0.2",
        "--train-bags",
        "30",
        "--test-bags",
        "5",
        "--d-p",
        "1",
        "--heads",
        "2",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let echoed = String::from_utf8(read(out.join("config.txt"))).unwrap();
    for line in ["lr = 0.2", "d_w = 6", "epochs = 1", "d_p = 1"] {
        assert!(echoed.lines().any(|l| l == line), "missing `{line}` in\n{echoed}");
    }
    let log = String::from_utf8(read(out.join("run.log"))).unwrap();
    assert!(log.contains("lr = 0.2") && log.contains("epoch 1\t"));

    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let err = fails(&[
        "train",
        "--data",
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn synthetic_runs_default_to_fifteen_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--data",
        "synth",
        "--train-bags",
        "4",
        "--test-bags",
        "1",
        "--d-w",
        "4",
        "--d-p",
        "2",
        "--heads",
        "2",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    let echoed = String::from_utf8(read(tmp.path().join("config.txt"))).unwrap();
    assert!(echoed.lines().any(|l| l == "epochs = 15"), "{echoed}");
    assert_eq!(
        String::from_utf8(read(tmp.path().join("loss.tsv")))
            .unwrap()
            .lines()
            .count(),
        15
    );
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let err = fails(&["train", "--data", "/nonexistent/train.txt", "--out-dir", dir]);
    assert!(
        err.contains("/nonexistent/train.txt") && err.contains("--help"),
        "{err}"
    );
    fails(&["train", "--out-dir", dir]);
    fails(&[
        "train",
        "--data",
        "synth",
        "--heads",
        "7",
        "--d-model",
        "24",
        "--out-dir",
        dir,
    ]);

    let bogus = tmp.path().join("bogus.ckpt");
    fs::write(&bogus, b"DSRECKPT but not really").unwrap();
    let err = fails(&[
        "eval",
        "--checkpoint",
        bogus.to_str().unwrap(),
        "--data",
        "synth",
        "--out-dir",
        dir,
    ]);
    assert!(err.contains("checkpoint"), "{err}");

    let ckpt = train_small(&tmp.path().join("m"), "2", "0");
    let labels = tmp.path().join("labels.txt");
    fs::write(&labels, "NA\n/other\n").unwrap();
    let err = fails(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synth",
        "--labels",
        labels.to_str().unwrap(),
        "--out-dir",
        dir,
    ]);
    assert!(err.contains("label set mismatch"), "{err}");

    let empty = write_sentences(tmp.path(), &[]);
    fails(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", &empty]);
    fails(&[
        "inspect-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synth",
        "--bag",
        "100000",
    ]);
    fails(&[
        "inspect-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synth",
        "--pair",
        "nobody,nothing",
    ]);
}

#[test]
fn predict_groups_sentences_by_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(&tmp.path().join("m"), "3", "1");
    let ckpt = ckpt.to_str().unwrap();

    let one = write_sentences(tmp.path(), &["a\tb\tent1\tent2\t?\tent1 w3 r1m0 ent2 ###END###"]);
    let out = ok(&["predict", "--checkpoint", ckpt, "--data", &one]);
    assert_eq!(out.lines().count(), 1);

    let two = write_sentences(
        tmp.path(),
        &[
            "a\tb\tent1\tent2\t?\tent1 w3 r1m0 ent2 ###END###",
            "a\tb\tent1\tent2\t?\tent2 w9 w4 ent1 . ###END###",
            "c\td\tent3\tent4\tNA\tent3 w1 ent4 ###END###",
        ],
    );
    let out = ok(&["predict", "--checkpoint", ckpt, "--data", &two, "--full"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(&fields[..3], &["a", "b", "2"]);
    for line in lines {
        let total: f64 = line
            .split('\t')
            .skip(5)
            .map(|kv| kv.rsplit_once('=').unwrap().1.parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-5, "{line}");
    }
}

#[test]
fn inspect_attention_exports_normalized_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(&tmp.path().join("m"), "4", "1");
    let ckpt = ckpt.to_str().unwrap();

    let single = write_sentences(
        tmp.path(),
        &["a\tb\tent1\tent2\t/synthetic/rel_1\tent1 w3 r1m0 w7 ent2 ###END###"],
    );
    let out = ok(&[
        "inspect-attention",
        "--checkpoint",
        ckpt,
        "--data",
        &single,
        "--bag",
        "0",
    ]);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0\t1.000000\t"), "{out}");

    let export = tmp.path().join("export");
    let out = ok(&[
        "inspect-attention",
        "--checkpoint",
        ckpt,
        "--data",
        "synth",
        "--pair",
        "test.3.h,test.3.t",
        "--out-dir",
        export.to_str().unwrap(),
    ]);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with("signal") || r.ends_with("noise")));
    let alpha: f64 = rows
        .iter()
        .map(|r| r.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((alpha - 1.0).abs() < 1e-5);

    let mut matrices = 0;
    for entry in fs::read_dir(&export).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_owned();
        if !name.starts_with("sentence") {
            continue;
        }
        matrices += 1;
        for row in fs::read_to_string(&path).unwrap().lines() {
            let s: f64 = row.split('\t').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-6, "{name}: row sums to {s}");
        }
    }
    assert_eq!(matrices, 3 * 4);
    assert!(export.join("alpha.tsv").exists());

    let summary = ok(&["inspect-attention", "--checkpoint", ckpt, "--data", "synth", "--all"]);
    assert!(summary.lines().any(|l| l == "bags\t40"), "{summary}");
}

#[test]
fn synth_files_train_through_the_file_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--seed",
        "9",
        "--train-bags",
        "30",
        "--test-bags",
        "10",
        "--relations",
        "3",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    for f in ["train.txt", "test.txt", "labels.txt", "signal.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(data.join("signal.tsv")).unwrap().lines().count(), 40);
    let again = tmp.path().join("again");
    ok(&[
        "synth",
        "--seed",
        "9",
        "--train-bags",
        "30",
        "--test-bags",
        "10",
        "--relations",
        "3",
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert_eq!(read(data.join("train.txt")), read(again.join("train.txt")));

    let model = tmp.path().join("model");
    let train = data.join("train.txt");
    let labels = data.join("labels.txt");
    ok(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--min-count",
        "1",
        "--epochs",
        "1",
        "--d-w",
        "8",
        "--d-p",
        "2",
        "--heads",
        "4",
        "--out-dir",
        model.to_str().unwrap(),
    ]);
    let ckpt = model.join("model.ckpt");
    let test = data.join("test.txt");
    let out = ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--ns",
        "5",
        "--out-dir",
        model.to_str().unwrap(),
    ]);
    assert!(out.contains("all\t5\t"), "{out}");
    let err = fails(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--noise-rate",
        "0.2",
        "--out-dir",
        model.to_str().unwrap(),
    ]);
    assert!(err.contains("--data synth"));
}
