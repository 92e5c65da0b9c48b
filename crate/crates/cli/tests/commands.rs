use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use sslf_cli::commands::{evaluate_into, Split};
use sslf_cli::{exit, run, Cli, RunConfig};
use sslf_core::gradsuite::tiny_configs;
use sslf_core::training::{ClassWeights, Predictor};
use sslf_core::{CorruptionSpec, ImageSet, Result, Tensor};

fn tiny_config(out: &Path) -> RunConfig {
    let (unet, backbone) = tiny_configs();
    let mut cfg = RunConfig {
        out_dir: out.to_path_buf(),
        unet,
        backbone,
        ..RunConfig::default()
    };
    cfg.fusion.head_dims = vec![16];
    cfg.fusion.common_dim = 8;
    cfg.data.image_size = 16;
    cfg.data.val_fraction = 0.34;
    cfg.data.synthetic.per_class = 3;
    cfg.data.synthetic.size = 16;
    cfg.pretexts = vec![CorruptionSpec::gaussian_noise(0.1), CorruptionSpec::patch_mask(4, 0.5)];
    cfg.pretrain.epochs = 2;
    cfg.pretrain.learning_rate = 1e-3;
    cfg.classify.epochs = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn sslf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslf")).args(args).arg("--quiet").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_in_process(args: &[&str]) -> (std::result::Result<(), sslf_cli::CliError>, String) {
    let cli = Cli::try_parse_from(std::iter::once("sslf").chain(args.iter().copied()).chain(["--quiet"])).unwrap();
    let mut out = Vec::new();
    let r = run(cli, &mut out);
    (r, String::from_utf8(out).unwrap())
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_prints_summary_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    let o = sslf(&["synth", "--per-class", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::OK), "{}", stderr(&o));
    assert!(stdout(&o).contains("160 images, 10 classes"), "{}", stdout(&o));
    let first = tree_bytes(&out);
    assert_eq!(first.len(), 161);
    let o = sslf(&["synth", "--per-class", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::OK));
    assert_eq!(tree_bytes(&out), first);
}

#[test]
fn synth_into_unwritable_location_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("out");
    let o = sslf(&["synth", "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::IO));
    assert!(stderr(&o).contains(blocker.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn unknown_variant_lists_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sslf(&["train", "--variant", "resnet", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    let err = stderr(&o);
    for name in ["unet", "efficient", "fusion", "fusion-attention", "all"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_errors_and_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = sslf(&["synth", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::IO));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"unet": {"depth": "three"}}"#).unwrap();
    let o = sslf(&["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    let o = sslf(&["synth", "--per-class", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
}

#[test]
fn select_needs_existing_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let a = tmp.path().join("a.json");
    std::fs::write(&a, "{}").unwrap();
    let o = sslf(&["select", a.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    let missing = tmp.path().join("missing.json");
    let o = sslf(&["select", a.to_str().unwrap(), missing.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(exit::IO), "{}", stderr(&o));
}

#[test]
fn pretrain_select_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("run"));
    let cfg_path = write_config(tmp.path(), &cfg);
    let c = cfg_path.to_str().unwrap();

    let (r, text) = run_in_process(&["pretrain", "--config", c]);
    r.unwrap();
    assert!(text.contains("selected"), "{text}");
    let pre = cfg.out_dir.join("pretrain");
    for kind in ["gaussian_noise", "patch_mask"] {
        for f in ["unet.ckpt", "curve.csv", "report.json"] {
            assert!(pre.join(kind).join(f).is_file(), "{kind}/{f}");
        }
    }
    let curve = std::fs::read_to_string(pre.join("gaussian_noise/curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,train_loss,val_mse"));
    assert_eq!(curve.lines().count(), 3);

    let reports: Vec<String> = ["gaussian_noise", "patch_mask"]
        .iter()
        .map(|k| pre.join(k).join("report.json").to_string_lossy().into_owned())
        .collect();
    let (r, text) = run_in_process(&["select", &reports[0], &reports[1], "--config", c]);
    r.unwrap();
    assert!(text.contains("selected"));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("selection.json")).unwrap()).unwrap();
    assert_eq!(record["compared"].as_array().unwrap().len(), 2);

    // flags win over the config file
    let (r, text) = run_in_process(&["train", "--variant", "all", "--epochs", "1", "--config", c]);
    r.unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    for v in ["unet", "efficient", "fusion", "fusion-attention"] {
        let dir = cfg.out_dir.join("train").join(v);
        let curve = std::fs::read_to_string(dir.join("curve.csv")).unwrap();
        assert_eq!(curve.lines().next(), Some("epoch,train_loss,val_accuracy,val_balanced_accuracy"));
        assert_eq!(curve.lines().count(), 2, "{v}");
        assert!(dir.join("report.json").is_file() && dir.join("model.ckpt").is_file());
    }
    assert!(cfg.out_dir.join("train/variants.csv").is_file());

    let ckpt = cfg.out_dir.join("train/fusion/model.ckpt");
    let (r, _) = run_in_process(&["eval", ckpt.to_str().unwrap(), "--split", "train", "--config", c]);
    r.unwrap();
    let ev: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("eval/fusion-train/eval.json")).unwrap()).unwrap();
    let recorded = ev["recorded_train_accuracy"].as_f64().unwrap();
    assert!((ev["accuracy"].as_f64().unwrap() - recorded).abs() <= 0.001);
    assert!(cfg.out_dir.join("eval/fusion-train/report.txt").is_file());
}

#[test]
fn pretrained_from_another_architecture_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    cfg.pretexts = vec![CorruptionSpec::gaussian_noise(0.1)];
    cfg.pretrain.epochs = 0;
    let c = write_config(tmp.path(), &cfg);
    run_in_process(&["pretrain", "--config", c.to_str().unwrap()]).0.unwrap();
    let ckpt = cfg.out_dir.join("pretrain/gaussian_noise/unet.ckpt");

    cfg.unet.base_channels = 8;
    let c = write_config(tmp.path(), &cfg);
    let (r, _) = run_in_process(&["train", "--pretrained", ckpt.to_str().unwrap(), "--config", c.to_str().unwrap()]);
    let e = r.unwrap_err();
    assert_eq!(e.code, exit::CONFIG);
    assert!(e.message.contains("unet.base_channels"), "{}", e.message);
}

#[test]
fn overflowing_loss_reports_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    // the weighted mean overflows f32 and the loss becomes NaN
    cfg.classify.class_weights = Some(ClassWeights::Explicit(vec![3e38; 10]));
    let c = write_config(tmp.path(), &cfg);
    let o = sslf(&["train", "--variant", "efficient", "--config", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::DIVERGENCE), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

/// Replays the true labels in order.
struct PerfectStub {
    labels: Vec<usize>,
    pos: usize,
}

impl Predictor for PerfectStub {
    fn predict_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        let n = batch.shape()[0];
        let out = self.labels[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(out)
    }
}

#[test]
fn perfect_predictor_reports_unit_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let set = ImageSet {
        images: (0..10).map(|_| Tensor::zeros(vec![3, 4, 4])).collect(),
        labels: (0..10).collect(),
    };
    let mut stub = PerfectStub {
        labels: set.labels.clone(),
        pos: 0,
    };
    let rec = evaluate_into(&mut stub, &set, 3, tmp.path(), "stub".into(), Split::All, None).unwrap();
    assert_eq!(rec.accuracy, 1.0);
    assert_eq!(rec.balanced_accuracy, 1.0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["accuracy"], 1.0);
    assert!(std::fs::read_to_string(tmp.path().join("report.txt")).unwrap().contains("1.000"));
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = sslf(&["gradcheck", "--out", out]);
    assert_eq!(o.status.code(), Some(exit::OK), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.contains(" pass ")).count() >= 39, "{text}");
    assert!(tmp.path().join("gradcheck.json").is_file());

    let o = sslf(&["gradcheck", "--inject-fault", "upsample2d", "--out", out]);
    assert_eq!(o.status.code(), Some(exit::GRADIENT));
    assert!(stderr(&o).contains("upsample2d"), "{}", stderr(&o));
    let failing: Vec<String> = stdout(&o).lines().filter(|l| l.contains("FAIL")).map(str::to_string).collect();
    assert!(failing.iter().any(|l| l.starts_with("upsample2d")), "{failing:?}");

    let o = sslf(&["gradcheck", "--inject-fault", "no_such_op", "--out", out]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
}
