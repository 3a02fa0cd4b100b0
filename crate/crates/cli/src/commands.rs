//! The subcommands. Output layout under the output directory:
//!
//! ```text
//! data/        train.json, test.json, synthetic PNGs        (synth)
//! pretrain/    backbone.ckpt, record.{json,csv}             (pretrain)
//! train/<method>/n<n>/  detector.ckpt, record.{json,csv}    (train)
//! eval/<method>/n<n>/   report.{json,csv}, predictions.json (eval)
//! eval/        reports.csv, table.txt
//! gradcam/<method>/n<n>/  <record>.{png,f32,json}, <record>_overlay.png
//! compare/     comparison.{csv,txt}, differences_<ref>.{csv,txt}, diff_<ref>_<metric>.png
//! ```
//!
//! Every stage directory also receives `config.toml`, the resolved
//! configuration (seed included) that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use ssdet::data::{
    build_subset, filter_single_object, generate_synthetic_dataset, ingest_voc, scan_image_dir, split_train_val,
    CachedImages, DatasetManifest, DiskImages, ImageSource, Normalization, Source, SubsetSpec,
};
use ssdet::explain::{self, TargetScore};
use ssdet::metrics::{self, DatasetTag, EvalReport, Method, PredictionRecord, ReportContext};
use ssdet::model::{
    import_safetensors, load_checkpoint, save_checkpoint, Checkpoint, DetectionHeads, Detector, FeatureExtractor,
    ProjectionHead, Provenance, DEFAULT_BN_EPS,
};
use ssdet::train::{self, EpochRecord, TrainRecord};

use crate::config::{CamTarget, DatasetSource, ExperimentConfig};
use crate::error::CliError;
use crate::plot;

/// Datasets at or below this many records are decoded once and kept in memory.
const CACHE_LIMIT: usize = 2048;

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub verbose: bool,
}

impl Context {
    /// Applies the `--out` and `--seed` overrides to `config`.
    pub fn new(mut config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>, force: bool) -> Self {
        if let Some(s) = seed {
            config.set_seed(s);
        }
        if let Some(o) = out {
            config.output.dir = o;
        }
        Self {
            out: config.output.dir.clone(),
            config,
            force,
            verbose: false,
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> u64 {
        self.config.dataset.seed
    }

    /// Refuses to touch a stage whose outputs already exist, unless forced.
    fn claim(&self, dir: &Path, outputs: &[&str]) -> Result<(), CliError> {
        if !self.force {
            if let Some(f) = outputs.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
                return Err(CliError::Config(format!(
                    "{} exists; pass --force to overwrite",
                    f.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        fs::write(dir.join("config.toml"), self.config.to_toml()).map_err(|e| io_error(dir, e))
    }

    fn detector_dir(&self, stage: &str, method: Method, n: usize) -> PathBuf {
        self.out.join(stage).join(method_id(method)).join(format!("n{n}"))
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out.join("pretrain").join("backbone.ckpt")
    }

    pub fn detector_path(&self, method: Method, n: usize) -> PathBuf {
        self.detector_dir("train", method, n).join("detector.ckpt")
    }

    fn normalization(&self) -> Normalization {
        self.config.detector.augmentation.normalization
    }

    fn data_root(&self) -> Result<PathBuf, CliError> {
        self.config.data_root()
    }

    fn classes(&self) -> Vec<String> {
        self.config.classes()
    }

    /// Labeled training manifest (before subset sampling).
    pub fn train_manifest(&self) -> Result<(DatasetManifest, PathBuf), CliError> {
        let root = self.data_root()?;
        match self.config.dataset.source {
            DatasetSource::Synthetic => Ok((load_manifest(&root.join("train.json"))?, root)),
            DatasetSource::Voc => {
                let dir = root.join(&self.config.dataset.voc.train_dir);
                Ok((self.ingest(&dir, Source::Voc2012)?, dir))
            }
        }
    }

    pub fn test_manifest(&self) -> Result<(DatasetManifest, PathBuf), CliError> {
        let root = self.data_root()?;
        match self.config.dataset.source {
            DatasetSource::Synthetic => Ok((load_manifest(&root.join("test.json"))?, root)),
            DatasetSource::Voc => {
                let dir = root.join(&self.config.dataset.voc.test_dir);
                Ok((self.ingest(&dir, Source::Voc2007)?, dir))
            }
        }
    }

    fn pool_manifest(&self) -> Result<(DatasetManifest, PathBuf), CliError> {
        match self.config.dataset.source {
            DatasetSource::Synthetic => {
                let (m, root) = self.train_manifest()?;
                Ok((m.to_unlabeled_pool(), root))
            }
            DatasetSource::Voc => {
                let dir = self.data_root()?.join(&self.config.dataset.voc.pool_dir);
                require(&dir)?;
                Ok((scan_image_dir(&dir, self.seed())?, dir))
            }
        }
    }

    fn ingest(&self, dir: &Path, source: Source) -> Result<DatasetManifest, CliError> {
        require(dir)?;
        let classes = self.classes();
        let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
        Ok(filter_single_object(&ingest_voc(dir, source, &refs, self.seed())?))
    }

    fn images(&self, root: &Path, manifest: &DatasetManifest) -> Result<Box<dyn ImageSource>, CliError> {
        let disk = DiskImages {
            root: root.to_path_buf(),
            side: self.config.dataset.image_side,
            normalization: self.normalization(),
        };
        if manifest.len() <= CACHE_LIMIT {
            Ok(Box::new(CachedImages::new(&disk, &manifest.records)?))
        } else {
            Ok(Box::new(disk))
        }
    }

    /// `(train, val)` for one `n`.
    pub fn subset(&self, labeled: &DatasetManifest, n: usize) -> Result<(DatasetManifest, DatasetManifest), CliError> {
        let classes = self.classes();
        let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
        let subset = build_subset(labeled, &SubsetSpec::new(&refs, n, self.seed()))?;
        Ok(split_train_val(&subset, self.config.dataset.train_fraction, self.seed())?)
    }

    fn method_checkpoint(&self, method: Method, ssl: Option<&Path>) -> Result<Checkpoint, CliError> {
        let arch = self.config.ssl.architecture;
        let ck = match method {
            Method::Ssl => {
                let path = ssl.map(Path::to_path_buf).unwrap_or_else(|| self.backbone_path());
                read_checkpoint(&path)?
            }
            Method::Baseline => {
                let path = self.config.detector.baseline_checkpoint.clone().ok_or_else(|| {
                    CliError::Config("detector.baseline_checkpoint: required for the baseline method".into())
                })?;
                if path.extension().is_some_and(|e| e == "safetensors") {
                    let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
                    import_safetensors(&bytes, arch, DEFAULT_BN_EPS, &self.config.detector.train.digest())?
                } else {
                    read_checkpoint(&path)?
                }
            }
            Method::Random => Checkpoint::from_backbone(
                &FeatureExtractor::new(arch, self.seed()),
                Provenance::Random,
                &self.config.detector.train.digest(),
            ),
        };
        ck.backbone(arch)?;
        Ok(ck)
    }
}

pub fn method_id(m: Method) -> &'static str {
    match m {
        Method::Ssl => "ssl",
        Method::Baseline => "baseline",
        Method::Random => "random",
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingArtifact(format!("{}: {e}", path.display()))
    } else {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(path.display().to_string()))
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    require(path)?;
    Ok(DatasetManifest::load(path)?)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require(path)?;
    Ok(load_checkpoint(path)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn save_record(record: &TrainRecord, dir: &Path) -> Result<(), CliError> {
    Ok(record.save(dir, "record")?)
}

fn epoch_line(tag: &str, e: &EpochRecord) -> String {
    let val = e.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    format!("{tag} epoch {:>3}  train {:.4}  val {val}  {:.1}s", e.epoch, e.train_loss, e.seconds)
}

/// Renders the synthetic train and test sets to `<data root>`.
pub fn cmd_synth(ctx: &Context) -> Result<PathBuf, CliError> {
    let cfg = &ctx.config;
    if cfg.dataset.source != DatasetSource::Synthetic {
        return Err(CliError::Config("dataset.source: synth needs `synthetic`".into()));
    }
    let root = ctx.data_root()?;
    ctx.claim(&root, &["train.json", "test.json"])?;
    let classes = ctx.classes();
    let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let side = cfg.dataset.image_side;
    let seed = ctx.seed();
    let s = &cfg.dataset.synthetic;
    for (name, count, seed) in [
        ("train", s.train_images, seed),
        ("test", s.test_images, seed + s.test_seed_offset),
    ] {
        let mut ds = generate_synthetic_dataset(count, &refs, side, seed)?;
        if name == "test" {
            ds.manifest = ds.manifest.with_records(ssdet::data::Split::Test, ds.manifest.records.clone());
        }
        ds.write_pngs(&root)?;
        ds.manifest.save(&root.join(format!("{name}.json")))?;
        ctx.log(format!("synth: {count} {name} images under {}", root.display()));
    }
    Ok(root)
}

/// Contrastive pre-training on the unlabeled pool.
pub fn cmd_pretrain(ctx: &Context) -> Result<PathBuf, CliError> {
    let cfg = &ctx.config;
    let dir = ctx.out.join("pretrain");
    let (pool, root) = ctx.pool_manifest()?;
    ctx.claim(&dir, &["backbone.ckpt"])?;
    let source = ctx.images(&root, &pool)?;
    let arch = cfg.ssl.architecture;
    let backbone = FeatureExtractor::new(arch, ctx.seed());
    let head = ProjectionHead::new(backbone.out_channels(), ctx.seed());
    let (ck, record) = train::pretrain_ssl_with_progress(
        &cfg.ssl.train,
        &pool,
        source.as_ref(),
        backbone,
        head,
        &cfg.ssl.augmentation,
        &mut |e| ctx.log(epoch_line("pretrain", e)),
    )?;
    let path = dir.join("backbone.ckpt");
    save_checkpoint(&ck, &path)?;
    let mut record = record;
    record.checkpoint = Some(path.display().to_string());
    save_record(&record, &dir)?;
    ctx.log(format!("pretrain: best epoch {} -> {}", record.best_epoch, path.display()));
    Ok(path)
}

/// Frozen-backbone detector training for every configured method and `n`.
pub fn cmd_train(ctx: &Context, ssl_checkpoint: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &ctx.config;
    let (labeled, root) = ctx.train_manifest()?;
    let mut cells = Vec::new();
    for &method in &cfg.detector.methods {
        let ck = ctx.method_checkpoint(method, ssl_checkpoint)?;
        for &n in &cfg.dataset.n_per_class {
            let dir = ctx.detector_dir("train", method, n);
            ctx.claim(&dir, &["detector.ckpt"])?;
            cells.push((method, n, ck.clone(), dir));
        }
    }
    let mut paths = Vec::new();
    for (method, n, ck, dir) in cells {
        let (train_set, val_set) = ctx.subset(&labeled, n)?;
        let both = train_set.with_records(train_set.split, [train_set.records.clone(), val_set.records.clone()].concat());
        let source = ctx.images(&root, &both)?;
        let backbone = ck.backbone(cfg.ssl.architecture)?;
        let heads = DetectionHeads::new(backbone.out_channels(), train_set.num_classes(), ctx.seed());
        let tag = format!("train {} n={n}", method_id(method));
        let (detector, mut record) = train::train_detector_with_progress(
            &cfg.detector.train,
            &ck,
            &train_set,
            &val_set,
            source.as_ref(),
            heads,
            &cfg.detector.augmentation,
            &mut |e| ctx.log(epoch_line(&tag, e)),
        )?;
        let path = dir.join("detector.ckpt");
        save_checkpoint(
            &detector.to_checkpoint(ck.meta.provenance, &cfg.detector.train.digest()),
            &path,
        )?;
        record.checkpoint = Some(path.display().to_string());
        save_record(&record, &dir)?;
        ctx.log(format!("{tag}: best epoch {} -> {}", record.best_epoch, path.display()));
        paths.push(path);
    }
    Ok(paths)
}

/// Evaluates every trained detector on the test set.
pub fn cmd_eval(ctx: &Context) -> Result<Vec<EvalReport>, CliError> {
    let cfg = &ctx.config;
    let mut detectors = Vec::new();
    for &method in &cfg.detector.methods {
        for &n in &cfg.dataset.n_per_class {
            let path = ctx.detector_path(method, n);
            detectors.push((method, n, Detector::from_checkpoint(&read_checkpoint(&path)?)?));
        }
    }
    let (test, root) = ctx.test_manifest()?;
    let eval_dir = ctx.out.join("eval");
    ctx.claim(&eval_dir, &["reports.csv", "table.txt"])?;
    let source = ctx.images(&root, &test)?;
    let mut reports = Vec::new();
    for (method, n, detector) in detectors {
        let dir = ctx.detector_dir("eval", method, n);
        ctx.claim(&dir, &["report.json"])?;
        let preds = train::predict(&detector, &test, source.as_ref())?;
        let report = evaluate(&preds, cfg.dataset.variant, method, n, ctx.seed())?;
        write(&dir.join("report.json"), report.to_json()?)?;
        write(&dir.join("report.csv"), report.to_csv()?)?;
        write(
            &dir.join("predictions.json"),
            serde_json::to_vec_pretty(&preds).map_err(|e| CliError::Runtime(e.to_string()))?,
        )?;
        ctx.log(format!(
            "eval {} n={n}: top1 {:.4} mean IoU {:.4}",
            method_id(method),
            report.top1,
            report.mean_iou
        ));
        reports.push(report);
    }
    write(&eval_dir.join("reports.csv"), metrics::reports_to_csv(&reports)?)?;
    write(&eval_dir.join("table.txt"), metrics::render_table(&reports))?;
    Ok(reports)
}

/// Report for one cell of the experiment matrix.
pub fn evaluate(
    preds: &[PredictionRecord],
    dataset: DatasetTag,
    method: Method,
    n: usize,
    seed: u64,
) -> Result<EvalReport, CliError> {
    let ctx = ReportContext {
        dataset: dataset.label().into(),
        method: method_id(method).into(),
        n_per_class: n,
        seed,
    };
    Ok(metrics::build_report(preds, &ctx)?)
}

fn file_stem(image_ref: &str) -> String {
    let p = Path::new(image_ref);
    let base = p.with_extension("");
    base.to_string_lossy()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Grad-CAM heatmaps and overlays for test records. Without explicit
/// `detector`, every trained detector of the configured matrix is used;
/// without `record_ids`, the first `eval.gradcam_records` test records.
pub fn cmd_gradcam(ctx: &Context, detector: Option<&Path>, record_ids: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &ctx.config;
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    match detector {
        Some(p) => jobs.push((p.to_path_buf(), ctx.out.join("gradcam").join("custom"))),
        None => {
            for &method in &cfg.detector.methods {
                for &n in &cfg.dataset.n_per_class {
                    jobs.push((ctx.detector_path(method, n), ctx.detector_dir("gradcam", method, n)));
                }
            }
        }
    }
    for (p, _) in &jobs {
        require(p)?;
    }
    let (test, root) = ctx.test_manifest()?;
    let records: Vec<_> = if record_ids.is_empty() {
        test.records.iter().take(cfg.eval.gradcam_records).cloned().collect()
    } else {
        record_ids
            .iter()
            .map(|id| {
                test.records
                    .iter()
                    .find(|r| &r.image_ref == id)
                    .cloned()
                    .ok_or_else(|| CliError::MissingArtifact(format!("test record `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let subset = test.with_records(test.split, records.clone());
    let source = ctx.images(&root, &subset)?;
    let mut written = Vec::new();
    for (path, dir) in jobs {
        let det = Detector::from_checkpoint(&read_checkpoint(&path)?)?;
        let stems: Vec<String> = records.iter().map(|r| format!("{}.png", file_stem(&r.image_ref))).collect();
        let stem_refs: Vec<&str> = stems.iter().map(String::as_str).collect();
        ctx.claim(&dir, &stem_refs)?;
        for r in &records {
            let image = source.tensor(r)?;
            let target = match (cfg.eval.gradcam_target, r.category.as_deref()) {
                (CamTarget::GroundTruth, Some(c)) => match det.class_names.iter().position(|n| n == c) {
                    Some(k) => TargetScore::Class(k),
                    None => TargetScore::Argmax,
                },
                _ => TargetScore::Argmax,
            };
            let heatmap = explain::gradcam(&det, &image, target, &r.image_ref)?;
            let stem = file_stem(&r.image_ref);
            explain::write_heatmap(&heatmap, &dir, &stem)?;
            let over = explain::overlay(&image, ctx.normalization(), &heatmap, cfg.eval.overlay_opacity)?;
            let over_path = dir.join(format!("{stem}_overlay.png"));
            over.save(&over_path).map_err(|e| CliError::Runtime(format!("{}: {e}", over_path.display())))?;
            written.push(dir.join(format!("{stem}.png")));
        }
        ctx.log(format!("gradcam: {} heatmaps in {}", records.len(), dir.display()));
    }
    Ok(written)
}

/// Everything `compare` produced, per dataset tag.
#[derive(Debug)]
pub struct Comparison {
    pub dataset: DatasetTag,
    pub reports: Vec<EvalReport>,
    pub reference: Method,
    pub rows: Vec<metrics::DifferenceRow>,
    pub table: String,
    pub differences: String,
}

fn collect_reports(dir: &Path, out: &mut Vec<EvalReport>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            let text = fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
            out.push(EvalReport::from_json(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?);
        }
    }
    Ok(())
}

/// Reads every `report.json` below `reports_dir` and writes the comparison
/// grid, the SSL-minus-reference differences and one plot per metric into
/// `out_dir`.
pub fn cmd_compare(reports_dir: &Path, out_dir: &Path, force: bool) -> Result<Vec<Comparison>, CliError> {
    require(reports_dir)?;
    let mut reports = Vec::new();
    collect_reports(reports_dir, &mut reports)?;
    if reports.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "no report.json below {}",
            reports_dir.display()
        )));
    }
    let mut tags: Vec<DatasetTag> = reports.iter().map(|r| r.dataset).collect();
    tags.sort();
    tags.dedup();

    let mut planned = Vec::new();
    for tag in &tags {
        let set: Vec<EvalReport> = reports.iter().filter(|r| r.dataset == *tag).cloned().collect();
        for reference in [Method::Baseline, Method::Random] {
            if set.iter().any(|r| r.method == reference) && set.iter().any(|r| r.method == Method::Ssl) {
                planned.push((*tag, set.clone(), reference));
            }
        }
    }
    if planned.is_empty() {
        return Err(CliError::MissingArtifact(
            "compare needs SSL reports and baseline or random reports".into(),
        ));
    }
    let suffix = |tag: DatasetTag| if tags.len() > 1 { format!("_{}", tag.label().to_lowercase()) } else { String::new() };
    if !force {
        for (tag, _, reference) in &planned {
            let f = out_dir.join(format!("differences_{}{}.csv", method_id(*reference), suffix(*tag)));
            if f.exists() {
                return Err(CliError::Config(format!("{} exists; pass --force to overwrite", f.display())));
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;

    let mut out = Vec::new();
    for (tag, mut set, reference) in planned {
        set.sort_by_key(|r| (r.n_per_class, r.method, r.seed));
        let sfx = suffix(tag);
        let table = metrics::render_table(&set);
        write(&out_dir.join(format!("comparison{sfx}.csv")), metrics::reports_to_csv(&set)?)?;
        write(&out_dir.join(format!("comparison{sfx}.txt")), &table)?;
        let rows = metrics::compare_reports(&set, Method::Ssl, reference)?;
        let differences = metrics::render_differences(&rows);
        let rid = method_id(reference);
        write(&out_dir.join(format!("differences_{rid}{sfx}.csv")), metrics::differences_to_csv(&rows)?)?;
        write(&out_dir.join(format!("differences_{rid}{sfx}.txt")), &differences)?;
        if let Some(first) = rows.first() {
            for (c, column) in first.columns.iter().enumerate() {
                let points: Vec<plot::Point> = rows
                    .iter()
                    .map(|r| plot::Point {
                        n: r.n_per_class,
                        value: r.mean[c],
                        spread: r.std[c],
                    })
                    .collect();
                let title = format!("{} SSL - {} {column}", tag.label(), reference.label());
                let name = column.to_lowercase().replace([' ', '-', '.'], "_");
                let path = out_dir.join(format!("diff_{rid}{sfx}_{name}.png"));
                plot::difference_plot(&title, &points)
                    .save(&path)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            }
        }
        out.push(Comparison {
            dataset: tag,
            reports: set,
            reference,
            rows,
            table,
            differences,
        });
    }
    Ok(out)
}
