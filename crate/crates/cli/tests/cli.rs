use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[synth]
num_classes = 3
total = 60
side = 16
seed = 3

[encoder]
input_height = 16
input_width = 16
global_pool = true
embedding_dim = 8
layers = [{ kind = "conv", out_channels = 4, kernel = 3, stride = 2, padding = 1 }]

[train]
epochs = 2
batch_size = 8

[train.nce]
noise_samples = 8
z_samples = 16

[eval]
k = 5
"#;

fn ufl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UFL_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ufl(args);
    assert!(
        out.status.success(),
        "ufl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn baseline_instance_top1_matches_reference() {
    let out = ok(&["baseline", "--top", "1", "--averaging", "instance"]);
    let v: f64 = out.trim().parse().unwrap();
    assert!((v - 40.1).abs() <= 0.3, "{v}");
}

#[test]
fn baseline_table_and_population_file() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("pops.csv");
    fs::write(&csv, "class,train_count,test_count\nA,3,1\nB,1,1\n").unwrap();
    let out = ok(&[
        "baseline",
        "--populations",
        s(&csv),
        "--top",
        "1",
        "--averaging",
        "class",
    ]);
    assert_eq!(out.trim(), "50.00");
    let table = ok(&["baseline", "--populations", s(&csv)]);
    assert!(table.starts_with("top-N"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = ufl(&[
        "train",
        "--mode",
        "ufl",
        "--config",
        "missing.toml",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}

#[test]
fn bad_flags_exit_1_and_help_exits_0() {
    assert_eq!(ufl(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(ufl(&["nonsense"]).status.code(), Some(1));
    assert_eq!(ufl(&["--help"]).status.code(), Some(0));
    assert_eq!(ufl(&["--threads", "0", "baseline"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = ufl(&[
        "train",
        "--data",
        s(&tmp.path().join("nope")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "7", "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let c = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--seed", "8", "--out", s(&c)]);
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn diverging_training_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let out = ufl(&[
        "train",
        "--config",
        s(&cfg),
        "--mode",
        "autoencoder",
        "--lr",
        "1e300",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn loss_flag_requires_ufl_mode() {
    let out = ufl(&[
        "train",
        "--mode",
        "supervised",
        "--loss",
        "nce",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_every_artifact_and_reruns_bit_exactly() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = tiny_config(t);
    let data = t.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);

    let run = t.join("run");
    let out = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--loss",
        "nce",
    ]);
    assert!(out.contains("ufl-nce"));
    for f in [
        "model.uflm",
        "bank.uflb",
        "loss.csv",
        "log.jsonl",
        "config.resolved.toml",
        "summary.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_loss,lr"));
    assert_eq!(loss.lines().count(), 3);

    // Rerunning from the resolved config reproduces the model and bank.
    let rerun = t.join("rerun");
    let resolved = run.join("config.resolved.toml");
    ok(&[
        "train",
        "--config",
        s(&resolved),
        "--data",
        s(&data),
        "--out",
        s(&rerun),
    ]);
    for f in [
        "model.uflm",
        "bank.uflb",
        "loss.csv",
        "config.resolved.toml",
    ] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(rerun.join(f)).unwrap(),
            "{f}"
        );
    }

    let model = run.join("model.uflm");
    let eval = t.join("eval");
    let table = ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&eval),
    ]);
    assert!(table.contains("class"));
    for f in [
        "report.json",
        "per_class.csv",
        "confusion_top1.csv",
        "confusion_top5.csv",
    ] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(eval.join("report.json")).unwrap()).unwrap();
    let top1 = report["top1_instance"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1));

    let hits = t.join("search.jsonl");
    ok(&[
        "search",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--k",
        "3",
        "--out",
        s(&hits),
    ]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&hits)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    for l in &lines {
        let m = l["matches"].as_array().unwrap();
        assert_eq!(m.len(), 3);
        assert!(m[0]["chip_path"].as_str().unwrap().ends_with(".png"));
        let sims: Vec<f64> = m
            .iter()
            .map(|x| x["similarity"].as_f64().unwrap())
            .collect();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }

    let bank = run.join("bank.uflb");
    let outl = t.join("outliers.json");
    ok(&[
        "outliers",
        "--data",
        s(&data),
        "--bank",
        s(&bank),
        "--out",
        s(&outl),
    ]);
    let o: serde_json::Value = serde_json::from_slice(&fs::read(&outl).unwrap()).unwrap();
    assert_eq!(o["sigmas"].as_f64(), Some(2.0));
    assert!(o["flagged_chips"].is_array());

    let tree = t.join("tree");
    let newick = ok(&[
        "hierarchy",
        "--confusion",
        s(&eval.join("confusion_top1.csv")),
        "--out",
        s(&tree),
    ]);
    assert!(newick.trim_end().ends_with(';'));
    for f in ["hierarchy.nwk", "hierarchy.json", "hierarchy.txt"] {
        assert!(tree.join(f).is_file(), "{f}");
    }

    let proj = t.join("proj.csv");
    ok(&[
        "project",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&proj),
    ]);
    let csv = fs::read_to_string(&proj).unwrap();
    assert!(csv.starts_with("id,x,y,label"));
    assert_eq!(csv.lines().count(), 1 + 48);

    // Inputs are left untouched by every command above.
    let fresh = t.join("fresh");
    ok(&["synth", "--config", s(&cfg), "--out", s(&fresh)]);
    assert_eq!(snapshot(&data), snapshot(&fresh));
}

#[test]
fn supervised_and_autoencoder_modes_write_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = tiny_config(t);
    let data = t.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    for mode in ["supervised", "autoencoder"] {
        let run = t.join(mode);
        let out = ok(&[
            "train",
            "--config",
            s(&cfg),
            "--mode",
            mode,
            "--epochs",
            "1",
            "--data",
            s(&data),
            "--out",
            s(&run),
        ]);
        assert!(out.starts_with(mode), "{out}");
        assert!(run.join("model.uflm").is_file());
        assert!(run.join("bank.uflb").is_file());
    }
}

#[test]
fn chip_command_splits_and_logs_discards() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let images = t.join("images");
    fs::create_dir_all(&images).unwrap();
    image::RgbImage::from_fn(100, 100, |x, y| image::Rgb([x as u8, y as u8, 7]))
        .save(images.join("scene.png"))
        .unwrap();
    let mut manifest = String::new();
    for i in 0..10 {
        let x = 10 + 5 * i;
        manifest += &format!(
            "{{\"image\":\"scene.png\",\"bbox\":[{x},20,{},40],\"class_id\":{}}}\n",
            x + 10,
            i % 2
        );
    }
    manifest += "{\"image\":\"scene.png\",\"bbox\":[0,0,10,50],\"class_id\":0}\n";
    manifest += "{\"image\":\"gone.png\",\"bbox\":[0,0,10,10],\"class_id\":1}\n";
    let mpath = t.join("manifest.jsonl");
    fs::write(&mpath, manifest).unwrap();
    let out_dir = t.join("chips");
    let msg = ok(&[
        "chip",
        "--manifest",
        s(&mpath),
        "--images",
        s(&images),
        "--test-fraction",
        "0.2",
        "--out",
        s(&out_dir),
    ]);
    assert!(
        msg.contains("8 train chips, 2 test chips, 2 discarded"),
        "{msg}"
    );
    let discards = fs::read_to_string(out_dir.join("discards.jsonl")).unwrap();
    assert_eq!(discards.lines().count(), 2);
    assert!(discards.contains("crosses"));
    assert!(discards.contains("gone.png"));
    assert_eq!(
        fs::read_to_string(out_dir.join("classes.txt")).unwrap(),
        "class_0\nclass_1\n"
    );
}
