use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssdet::data::BoundingBox;
use ssdet::metrics::{DatasetTag, EvalReport, Method, PredictionRecord, STRICT_RULE};
use ssdet_cli::commands;
use ssdet_cli::{CliError, ExperimentConfig};

const SMALL: &str = r#"
[dataset]
source = "synthetic"
n_per_class = [6]
seed = 3
image_side = 64

[dataset.synthetic]
train_images = 16
test_images = 6

[ssl]
architecture = "tiny-cnn"

[ssl.train]
max_epochs = 2
batch_size = 4

[detector]
methods = ["ssl", "random"]

[detector.train]
max_epochs = 3
batch_size = 4

[eval]
gradcam_records = 2
"#;

fn ssdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdet"))
        .current_dir(dir)
        .env_remove("SSDET_DATA_ROOT")
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

#[test]
fn invalid_config_exits_1_and_names_the_field() {
    let dir = setup("[dataset]\ntrain_fraction = 1.5\n");
    let o = ssdet(dir.path(), &["--config", "c.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset.train_fraction"), "{}", stderr(&o));

    std::fs::write(dir.path().join("c.toml"), "[dataset]\nsorce = \"synthetic\"\n").unwrap();
    let o = ssdet(dir.path(), &["--config", "c.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sorce"), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_exit_2_and_name_the_file() {
    let dir = setup(SMALL);
    let o = ssdet(dir.path(), &["--config", "c.toml", "--out", "o", "eval"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("detector.ckpt"), "{}", stderr(&o));

    let o = ssdet(dir.path(), &["--config", "missing.toml", "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"));

    let o = ssdet(dir.path(), &["--config", "c.toml", "--out", "o", "pretrain"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train.json"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = setup(SMALL);
    assert!(ssdet(dir.path(), &["--config", "c.toml", "--out", "o", "synth"]).status.success());
    std::fs::write(dir.path().join("bad.ckpt"), b"SSDETCK\0garbage").unwrap();
    let o = ssdet(dir.path(), &["--config", "c.toml", "--out", "o", "train", "--checkpoint", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn outputs_are_write_once_unless_forced() {
    let dir = setup(SMALL);
    let args = ["--config", "c.toml", "--out", "o", "synth"];
    assert!(ssdet(dir.path(), &args).status.success());
    let before = std::fs::read(dir.path().join("o/data/train.json")).unwrap();
    let o = ssdet(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("o/data/train.json")).unwrap(), before);
    let o = ssdet(dir.path(), &["--force", "--config", "c.toml", "--out", "o", "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("o/data/train.json")).unwrap(), before);
}

#[test]
fn seed_flag_reaches_the_snapshot_and_the_data() {
    let dir = setup(SMALL);
    assert!(ssdet(dir.path(), &["--config", "c.toml", "--out", "a", "synth"]).status.success());
    assert!(ssdet(dir.path(), &["--config", "c.toml", "--out", "b", "--seed", "11", "synth"]).status.success());
    let snap = std::fs::read_to_string(dir.path().join("b/data/config.toml")).unwrap();
    let cfg = ExperimentConfig::from_toml(&snap).unwrap();
    assert_eq!(cfg.dataset.seed, 11);
    assert_eq!(cfg.ssl.train.seed, 11);
    assert_eq!(cfg.detector.train.seed, 11);
    let a = std::fs::read(dir.path().join("a/data/train.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/data/train.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = setup(SMALL);
    for stage in [&["synth"][..], &["pretrain"], &["train"], &["eval"], &["gradcam"], &["compare"]] {
        let mut args = vec!["--config", "c.toml", "--out", "o"];
        args.extend_from_slice(stage);
        let o = ssdet(dir.path(), &args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    let o = dir.path().join("o");
    for f in [
        "pretrain/backbone.ckpt",
        "pretrain/record.json",
        "pretrain/record.csv",
        "pretrain/config.toml",
        "train/ssl/n6/detector.ckpt",
        "train/random/n6/record.csv",
        "eval/ssl/n6/report.json",
        "eval/random/n6/predictions.json",
        "eval/reports.csv",
        "eval/table.txt",
        "compare/comparison.csv",
        "compare/differences_random.csv",
        "compare/diff_random_mean_iou.png",
    ] {
        assert!(o.join(f).exists(), "missing {f}");
    }
    let cams: Vec<_> = std::fs::read_dir(o.join("gradcam/ssl/n6"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(cams.iter().filter(|f| f.ends_with("_overlay.png")).count(), 2, "{cams:?}");
    assert!(cams.iter().any(|f| f.ends_with(".f32")));
    let report = EvalReport::from_json(&std::fs::read_to_string(o.join("eval/ssl/n6/report.json")).unwrap()).unwrap();
    assert_eq!((report.method, report.n_per_class, report.num_records), (Method::Ssl, 6, 6));
}

fn unit_box(r: &mut ChaCha8Rng) -> BoundingBox {
    let x = r.gen_range(0.0..0.5);
    let y = r.gen_range(0.0..0.5);
    BoundingBox::new(x, y, x + r.gen_range(0.1..0.5), y + r.gen_range(0.1..0.5)).unwrap()
}

#[test]
fn ground_truth_copies_score_perfectly() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for k in [2usize, 5, 20] {
        let preds: Vec<PredictionRecord> = (0..40)
            .map(|i| {
                let target = r.gen_range(0..k);
                let b = unit_box(&mut r);
                let mut logits = vec![0.0; k];
                logits[target] = 1.0;
                PredictionRecord {
                    record_id: format!("r{i}"),
                    logits,
                    pred_box: b.to_array(),
                    target,
                    target_box: b,
                }
            })
            .collect();
        let rep = commands::evaluate(&preds, DatasetTag::Full, Method::Ssl, 3, 0).unwrap();
        assert_eq!((rep.top1, rep.top3), (1.0, 1.0));
        assert!((rep.mean_iou - 1.0).abs() < 1e-12);
        assert_eq!((rep.acc_iou_05, rep.acc_iou_07), (1.0, 1.0));
        assert_eq!(rep.top5.is_some(), k > 5);
    }
}

fn report(method: Method, v: [f64; 6]) -> EvalReport {
    EvalReport {
        dataset: DatasetTag::Full,
        method,
        n_per_class: 3,
        seed: 0,
        num_records: 0,
        top1: v[0],
        top3: v[1],
        top5: Some(v[2]),
        mean_iou: v[3],
        acc_iou_05: v[4],
        acc_iou_07: v[5],
        threshold_rule: STRICT_RULE.into(),
    }
}

#[test]
fn compare_reproduces_a_published_difference() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("eval");
    for (m, v) in [
        (Method::Baseline, [0.6259, 0.8236, 0.8880, 0.1685, 0.1206, 0.0541]),
        (Method::Ssl, [0.2223, 0.4691, 0.6215, 0.4169, 0.4080, 0.1464]),
    ] {
        let d = reports.join(commands::method_id(m));
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("report.json"), report(m, v).to_json().unwrap()).unwrap();
    }
    let out = dir.path().join("compare");
    let c = commands::cmd_compare(&reports, &out, false).unwrap();
    assert_eq!(c.len(), 1);
    assert!(c[0].differences.contains("+0.2484"), "{}", c[0].differences);
    assert!((c[0].rows[0].mean[3] - 0.2484).abs() < 1e-4);
    let csv = std::fs::read_to_string(out.join("differences_baseline.csv")).unwrap();
    assert!(csv.contains("+0.2484"), "{csv}");
    assert!(matches!(
        commands::cmd_compare(&reports, &out, false),
        Err(CliError::Config(_))
    ));
    assert!(commands::cmd_compare(&reports, &out, true).is_ok());
}

#[test]
fn compare_without_reports_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let e = commands::cmd_compare(dir.path(), &dir.path().join("out"), false).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
