use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str, train: &str, test: &str) {
    let o = qam(&["generate", "--out", p(dir), "--seed", seed, "--train", train, "--test", test]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const SMALL: &[&str] = &[
    "--reduced-channels", "4", "--embed-dim", "6", "--question-dim", "8", "--fusion-dim", "8",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    if !extra.contains(&"--batch-size") {
        args.extend_from_slice(&["--batch-size", "8"]);
    }
    qam(&args)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn version_and_help() {
    let o = qam(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("qam "));
    for sub in ["generate", "train", "eval", "predict"] {
        assert_eq!(code(&qam(&[sub, "--help"])), 0);
    }
}

#[test]
fn generate_is_deterministic_and_records_the_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    generate(&a, "7", "40", "10");
    generate(&b, "7", "40", "10");
    for f in ["train.jsonl", "test.jsonl", "manifest.json", "taxonomy.txt", "question_vocab.txt", "answer_vocab.txt"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn invalid_inputs_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let o = qam(&["generate", "--out", p(&d), "--proportions", "object=0.7,number=0.1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sum"));
    assert_eq!(code(&train(&t.path().join("missing"), &t.path().join("o"), &[])), 2);

    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nwarmup = 3\n").unwrap();
    generate(&d, "1", "10", "0");
    let o = train(&d, &t.path().join("o"), &["--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
    assert_eq!(code(&qam(&["--jobs", "0", "eval", "--checkpoint", "x", "--data", p(&d)])), 2);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("gen.cfg");
    fs::write(&cfg, "# small set\nseed = 3\ntrain = 12\ntest = 4\n").unwrap();
    let d = t.path().join("d");
    let o = qam(&["generate", "--out", p(&d), "--config", p(&cfg), "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["train"], 12);
}

#[test]
fn train_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, "2", "40", "12");
    let (o1, o2) = (t.path().join("r1"), t.path().join("r2"));
    for out in [&o1, &o2] {
        let o = train(&d, out, &["--epochs", "2", "--seed", "1", "--save-every", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("ACC."));
    }
    let h1 = fs::read_to_string(o1.join("history.csv")).unwrap();
    assert!(h1.starts_with("epoch,loss,train_acc,val_acc\n0,"));
    assert_eq!(h1.lines().count(), 4);
    assert_eq!(tree(&o1), tree(&o2));
    assert!(o1.join("epoch-002.ckpt").is_file());

    let ckpt = o1.join("model.ckpt");
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        let rep = t.path().join(format!("report{jobs}.json"));
        let o = qam(&["--jobs", jobs, "eval", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&rep)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("WUPS 0.9"));
        reports.push(fs::read(&rep).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let json: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["acc", "per_category", "wups00", "wups09"]);

    let other = t.path().join("other");
    generate(&other, "99", "40", "12");
    let o = qam(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn non_finite_training_exits_with_3() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, "4", "20", "0");
    let o = train(&d, &t.path().join("o"), &["--epochs", "3", "--learning-rate", "1e300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

fn first_record(d: &Path) -> serde_json::Value {
    let text = fs::read_to_string(d.join("train.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn csv_map(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn memorized_item_is_predicted_and_scored() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, "5", "1", "0");
    let out = t.path().join("m");
    let o = train(&d, &out, &["--epochs", "200", "--batch-size", "1", "--save-every", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("model.ckpt");

    let rep = out.join("train.json");
    let o = qam(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d), "--split", "train", "--out", p(&rep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&rep).unwrap()).unwrap();
    assert_eq!(json["acc"], 1.0);

    let rec = first_record(&d);
    let img = d.join(rec["image_path"].as_str().unwrap());
    let maps = t.path().join("maps");
    let o = qam(&[
        "predict", "--checkpoint", p(&ckpt), "--image", p(&img), "--question", rec["question"].as_str().unwrap(),
        "--out", p(&maps),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).split_whitespace().next().unwrap(), rec["answer"].as_str().unwrap());
    let m = csv_map(&maps.join("attention.csv"));
    assert_eq!(m.len(), 9);
    assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let pgm = fs::read(maps.join("attention.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));

    let bad = t.path().join("bad.ppm");
    fs::write(&bad, b"P6\n2 2\n255\nxx").unwrap();
    let o = qam(&["predict", "--checkpoint", p(&ckpt), "--image", p(&bad), "--question", "what is it"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn no_att_checkpoint_records_the_flag_and_predicts_uniformly() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, "6", "16", "0");
    let out = t.path().join("n");
    let o = train(&d, &out, &["--epochs", "1", "--no-att"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(out.join("model.ckpt")).unwrap();
    assert!(String::from_utf8_lossy(&bytes).contains("\"attention\":false"));

    let rec = first_record(&d);
    let img = d.join(rec["image_path"].as_str().unwrap());
    let o = qam(&[
        "predict", "--checkpoint", p(&out.join("model.ckpt")), "--image", p(&img), "--question",
        "where is the red circle", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(csv_map(&out.join("attention.csv")).iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
}
