use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sslf_core::data::{generate_synthetic, load_manifest, split, MANIFEST_FILE};
use sslf_core::gradsuite::{self, SuiteEntry};
use sslf_core::metrics::ClassificationReport;
use sslf_core::tensor::OpKind;
use sslf_core::training::checkpoint::fnv1a64;
use sslf_core::training::{
    config_divergence, evaluate, model_from_checkpoint, pretrain, select_pretext, train_classifier,
    unet_from_checkpoint, EpochMetrics, Flow, PretextReport, Predictor, Selection,
};
use sslf_core::{Checkpoint, ClassLabel, DatasetManifest, Error, FusedModel, ImageSet, ModelKind, UNet, VariantKind};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const SELECTION_FILE: &str = "selection.json";

/// Which part of the configured dataset a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    All,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?)
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    parse_json(path, &read_text(path)?)
}

/// `header` is written only for an empty table; otherwise field names come from `T`.
fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> CliResult<()> {
    let io_err = |e: csv::Error| CliError::io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).map_err(io_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

fn progress(cfg: &Session, line: std::fmt::Arguments<'_>) {
    if cfg.verbose {
        eprintln!("{line}");
    }
}

/// A validated configuration plus front-end settings.
pub struct Session {
    pub config: RunConfig,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

impl Session {
    pub fn new(mut config: RunConfig, verbose: bool) -> CliResult<Self> {
        config.resolve_seeds();
        config.validate()?;
        Ok(Self { config, verbose })
    }

    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.out().join("data")
    }

    /// The configured manifest, synthesizing the default dataset if needed.
    pub fn manifest(&self) -> CliResult<DatasetManifest> {
        if let Some(dir) = &self.config.data.dir {
            return Ok(load_manifest(&dir.join(MANIFEST_FILE))?);
        }
        let dir = self.synthetic_dir();
        let csv = dir.join(MANIFEST_FILE);
        if csv.is_file() {
            Ok(load_manifest(&csv)?)
        } else {
            Ok(generate_synthetic(&self.config.data.synthetic, &dir)?)
        }
    }

    pub fn load_split(&self) -> CliResult<(ImageSet, ImageSet)> {
        let m = self.manifest()?;
        let (train, val) = split(&m, self.config.data.val_fraction, self.config.seed)?;
        let size = self.config.data.image_size;
        Ok((ImageSet::load(&train, size)?, ImageSet::load(&val, size)?))
    }

    pub fn load_set(&self, which: Split) -> CliResult<ImageSet> {
        match which {
            Split::All => Ok(ImageSet::load(&self.manifest()?, self.config.data.image_size)?),
            Split::Train => Ok(self.load_split()?.0),
            Split::Val => Ok(self.load_split()?.1),
        }
    }
}

pub fn cmd_synth(s: &Session, out: &mut dyn Write) -> CliResult<DatasetManifest> {
    let dir = s.synthetic_dir();
    let m = generate_synthetic(&s.config.data.synthetic, &dir)?;
    let counts = m.counts();
    let classes = counts.iter().filter(|&&c| c > 0).count();
    let _ = writeln!(out, "{} images, {} classes", m.len(), classes);
    for (label, c) in ClassLabel::ALL.iter().zip(counts) {
        let _ = writeln!(out, "  {:<28} {c}", label.name());
    }
    let _ = writeln!(out, "written to {}", dir.display());
    Ok(m)
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    train_loss: f64,
    val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    #[serde(flatten)]
    pub selection: Selection,
    pub reports: Vec<PathBuf>,
    /// The winning U-Net weights, when stored next to its report.
    pub winner_checkpoint: Option<PathBuf>,
}

pub fn pretext_dir(out_dir: &Path, kind: sslf_core::CorruptionKind) -> PathBuf {
    out_dir.join("pretrain").join(kind.name())
}

/// One pretraining run per configured pretext; with two or more, also the
/// selection record.
pub fn cmd_pretrain(s: &Session, out: &mut dyn Write) -> CliResult<Vec<PretextReport>> {
    let cfg = &s.config;
    if cfg.pretexts.is_empty() {
        return Err(CliError::config("no pretexts configured"));
    }
    let (train, val) = s.load_split()?;
    let mut reports = Vec::new();
    let mut paths = Vec::new();
    for spec in &cfg.pretexts {
        let name = spec.kind.name();
        let unet = UNet::<f32>::build(&cfg.unet, cfg.seed)?;
        let mut observe = |epoch: usize, loss: f64, mse: f64| {
            progress(s, format_args!("pretrain {name} epoch {epoch}: train_loss {loss:.6} val_mse {mse:.6}"));
            Flow::Continue
        };
        let outcome = pretrain(unet, &train, &val, spec, &cfg.pretrain, &mut observe)?;
        let dir = pretext_dir(&cfg.out_dir, spec.kind);
        create_dir(&dir)?;
        outcome.checkpoint.save(&dir.join("unet.ckpt"))?;
        let r = &outcome.report;
        let rows: Vec<PretrainRow> = (0..r.train_curve.len())
            .map(|i| PretrainRow {
                epoch: i + 1,
                train_loss: r.train_curve[i],
                val_mse: r.val_curve[i],
            })
            .collect();
        write_csv(&dir.join("curve.csv"), &rows, &["epoch", "train_loss", "val_mse"])?;
        let report_path = dir.join("report.json");
        write_json(&report_path, r)?;
        let _ = writeln!(
            out,
            "{name}: val_mse {:.6} (baseline {:.6}), psnr {:.2} dB, best epoch {}",
            r.val_mse, r.baseline_mse, r.psnr, r.best_epoch
        );
        paths.push(report_path);
        reports.push(outcome.report);
    }
    if reports.len() >= 2 {
        write_selection(s, &reports, paths, out)?;
    }
    Ok(reports)
}

fn write_selection(
    s: &Session,
    reports: &[PretextReport],
    paths: Vec<PathBuf>,
    out: &mut dyn Write,
) -> CliResult<SelectionRecord> {
    let selection = select_pretext(reports)?;
    let winner_at = reports.iter().position(|r| r.kind == selection.winner).expect("winner is one of the reports");
    let ckpt = paths[winner_at].with_file_name("unet.ckpt");
    let record = SelectionRecord {
        winner_checkpoint: ckpt.is_file().then_some(ckpt),
        selection,
        reports: paths,
    };
    create_dir(s.out())?;
    write_json(&s.out().join(SELECTION_FILE), &record)?;
    for (kind, mse) in &record.selection.compared {
        let _ = writeln!(out, "  {:<16} val_mse {mse:.6}", kind.name());
    }
    let _ = writeln!(out, "selected {}", record.selection.winner.name());
    Ok(record)
}

pub fn cmd_select(s: &Session, report_paths: &[PathBuf], out: &mut dyn Write) -> CliResult<SelectionRecord> {
    if report_paths.len() < 2 {
        return Err(CliError::config(format!(
            "select needs at least two report files, got {}",
            report_paths.len()
        )));
    }
    // every file is read before any is parsed, so a missing one is reported as such
    let texts = report_paths.iter().map(|p| read_text(p)).collect::<CliResult<Vec<_>>>()?;
    let reports = report_paths
        .iter()
        .zip(&texts)
        .map(|(p, t)| parse_json::<PretextReport>(p, t))
        .collect::<CliResult<Vec<_>>>()?;
    write_selection(s, &reports, report_paths.to_vec(), out)
}

/// Result of training one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantKind,
    pub title: String,
    pub best_epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_balanced_accuracy: f64,
}

pub struct TrainOptions {
    pub variants: Vec<VariantKind>,
    pub pretrained: Option<PathBuf>,
}

pub fn variant_dir(out_dir: &Path, v: VariantKind) -> PathBuf {
    out_dir.join("train").join(v.cli_name())
}

/// The U-Net weights to start from: an explicit path, else the recorded
/// pretext winner under the output directory.
fn pretrained_source(s: &Session, explicit: Option<&Path>) -> CliResult<Option<PathBuf>> {
    if let Some(p) = explicit {
        return Ok(Some(p.to_path_buf()));
    }
    let record = s.out().join(SELECTION_FILE);
    if !record.is_file() {
        return Ok(None);
    }
    Ok(read_json::<SelectionRecord>(&record)?.winner_checkpoint)
}

fn load_pretrained(s: &Session, path: &Path) -> CliResult<(UNet<f32>, String)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    ck.expect_kind(ModelKind::UNet)?;
    let fields: Vec<String> = config_divergence(&json!(s.config.unet), ck.config())
        .into_iter()
        .map(|f| format!("unet.{f}"))
        .collect();
    if !fields.is_empty() {
        return Err(Error::ConfigMismatch { fields }.into());
    }
    Ok((unet_from_checkpoint(&ck)?, format!("{:016x}", fnv1a64(&bytes))))
}

fn write_report(dir: &Path, report: &ClassificationReport) -> CliResult<()> {
    write_file(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    write_file(&dir.join("report.txt"), report.to_text().as_bytes())
}

pub fn cmd_train(s: &Session, opts: &TrainOptions, out: &mut dyn Write) -> CliResult<Vec<VariantSummary>> {
    let cfg = &s.config;
    let (train, val) = s.load_split()?;
    let needs_unet = opts.variants.iter().any(|v| v.uses_unet());
    let pretrained = match pretrained_source(s, opts.pretrained.as_deref())? {
        Some(p) if needs_unet => Some(load_pretrained(s, &p)?),
        _ => None,
    };
    if needs_unet && pretrained.is_none() {
        progress(s, format_args!("no pretrained U-Net found; starting from random initialization"));
    }

    let mut summaries = Vec::new();
    for &variant in &opts.variants {
        let fusion = sslf_core::FusionConfig {
            variant,
            ..cfg.fusion.clone()
        };
        let mut model = FusedModel::<f32>::build(&fusion, &cfg.unet, &cfg.backbone, cfg.seed)?;
        let mut checksum = None;
        if variant.uses_unet() {
            if let Some((unet, sum)) = &pretrained {
                model.set_unet(unet.clone())?;
                checksum = Some(sum.clone());
            }
        }
        let name = variant.cli_name();
        let mut observe = |m: &EpochMetrics| {
            progress(
                s,
                format_args!(
                    "train {name} epoch {}: loss {:.5} val_acc {:.4} val_bal_acc {:.4}",
                    m.epoch, m.train_loss, m.val_accuracy, m.val_balanced_accuracy
                ),
            );
            Flow::Continue
        };
        let mut outcome = train_classifier(model, &train, &val, &cfg.classify, &mut observe)?;
        let ev = evaluate(&mut outcome.model, &val, cfg.classify.batch_size)?;

        let dir = variant_dir(&cfg.out_dir, variant);
        create_dir(&dir)?;
        let meta = &mut outcome.checkpoint.echo["metadata"];
        meta["variant"] = json!(variant);
        meta["pretrained_checksum"] = json!(checksum);
        meta["data"] = json!(cfg.data);
        outcome.checkpoint.save(&dir.join("model.ckpt"))?;
        write_csv(
            &dir.join("curve.csv"),
            &outcome.history,
            &["epoch", "train_loss", "val_accuracy", "val_balanced_accuracy"],
        )?;
        write_report(&dir, &ev.report)?;
        let summary = VariantSummary {
            variant,
            title: variant.title().to_string(),
            best_epoch: outcome.best_epoch,
            train_accuracy: outcome.train_accuracy,
            val_accuracy: ev.report.accuracy,
            val_balanced_accuracy: ev.report.balanced_accuracy,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        let _ = writeln!(
            out,
            "{:<40} accuracy {:.4}  balanced accuracy {:.4}",
            summary.title, summary.val_accuracy, summary.val_balanced_accuracy
        );
        summaries.push(summary);
    }
    if summaries.len() > 1 {
        write_csv(&s.out().join("train").join("variants.csv"), &summaries, &[])?;
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: String,
    pub split: Split,
    pub samples: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Training-set accuracy stored in the checkpoint, when present.
    pub recorded_train_accuracy: Option<f64>,
    pub report: ClassificationReport,
}

/// Evaluates `predictor` on `set` and writes `eval.json` and `report.txt` to `dir`.
pub fn evaluate_into(
    predictor: &mut dyn Predictor,
    set: &ImageSet,
    batch_size: usize,
    dir: &Path,
    source: String,
    split: Split,
    recorded_train_accuracy: Option<f64>,
) -> CliResult<EvalRecord> {
    let ev = evaluate(predictor, set, batch_size)?;
    let record = EvalRecord {
        source,
        split,
        samples: set.len(),
        accuracy: ev.report.accuracy,
        balanced_accuracy: ev.report.balanced_accuracy,
        recorded_train_accuracy,
        report: ev.report,
    };
    create_dir(dir)?;
    write_json(&dir.join("eval.json"), &record)?;
    write_file(&dir.join("report.txt"), record.report.to_text().as_bytes())?;
    Ok(record)
}

pub fn cmd_eval(s: &Session, checkpoint: &Path, which: Split, out: &mut dyn Write) -> CliResult<EvalRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = model_from_checkpoint(&ck)?;
    let set = s.load_set(which)?;
    let name = checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| checkpoint.file_stem())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let dir = s.out().join("eval").join(format!("{name}-{}", split_name(which)));
    let recorded = ck.metadata()["train_accuracy"].as_f64();
    let record = evaluate_into(
        &mut model,
        &set,
        s.config.classify.batch_size,
        &dir,
        checkpoint.display().to_string(),
        which,
        recorded,
    )?;
    let _ = write!(out, "{}", record.report.to_text());
    let _ = writeln!(out, "written to {}", dir.display());
    Ok(record)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::All => "all",
    }
}

pub fn parse_op(name: &str) -> CliResult<OpKind> {
    OpKind::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        CliError::config(format!("unknown op {name:?}; valid: {}", names.join(", ")))
    })
}

/// Runs the finite-difference suite; any failure maps to the gradient exit code.
pub fn cmd_gradcheck(out_dir: &Path, fault: Option<OpKind>, out: &mut dyn Write) -> CliResult<Vec<SuiteEntry>> {
    let entries = gradsuite::run_suite(fault)?;
    for e in &entries {
        let verdict = if e.passed { "pass" } else { "FAIL" };
        let _ = writeln!(out, "{:<28} {verdict}  max_rel_err {:.3e}", e.name, e.max_relative_error);
    }
    create_dir(out_dir)?;
    write_json(&out_dir.join("gradcheck.json"), &entries)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        let _ = writeln!(out, "all {} checks passed (tolerance {:e})", entries.len(), gradsuite::TOLERANCE);
        Ok(entries)
    } else {
        Err(CliError::gradient(format!("gradient check failed: {}", failed.join(", "))))
    }
}
