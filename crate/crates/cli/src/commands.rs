//! The subcommands as library functions, so tests can drive whole runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvla::blackbox::{reorganize_prompt, Report};
use cvla::cvla::{prepare_dataset, select_checkpoint, train_cvla, CounterfactualRecord, Explainer, TrainedCheckpoint};
use cvla::evalx::{
    emit_panel, localization_score, record_frames, run_ablation, success_rate, AblationReport, ExplainSettings,
    Localization, ModelVariant, SuccessReport,
};
use cvla::frames::{sweep_threshold, DiffFrame, SweepRow};
use cvla::image::{BBox, Image};
use cvla::synthworld::{sample_dataset, PhantomSample};
use serde::{Deserialize, Serialize};

use crate::config::{config_error, CliConfig};
use crate::dataset::{read_dataset, write_dataset};
use crate::run::{RunLock, RunManifest};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_synth(cfg: &CliConfig, config_path: Option<&Path>, out: &Path) -> Result<usize> {
    let _lock = RunLock::acquire(out)?;
    let manifest = RunManifest::start("synth", config_path, cfg.seed, out);
    let vocab = cfg.world.vocabulary()?;
    let samples = sample_dataset(&cfg.world, cfg.n_samples, &cfg.prevalence.resolve(vocab.len()))?;
    write_dataset(out, &cfg.world, &samples)?;
    tracing::info!(n = samples.len(), dir = %out.display(), "dataset written");
    manifest.finish()?;
    Ok(samples.len())
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SELECTED: &str = "selected.json";
pub const CHECKPOINT_INDEX: &str = "checkpoints.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub val_psnr: f64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub generator_id: String,
    pub source: String,
    pub selected: CheckpointEntry,
    pub latest: CheckpointEntry,
    pub aborted: Option<String>,
    pub label_disagreements: usize,
}

fn load_world_samples(cfg: &CliConfig, data: &Path) -> Result<Vec<PhantomSample>> {
    let (world, samples) = read_dataset(data)?;
    if world.vocabulary()? != cfg.world.vocabulary()? || world.image_size != cfg.world.image_size {
        return Err(config_error(format!(
            "dataset {} was rendered with a different vocabulary or image size than the config",
            data.display()
        )));
    }
    Ok(samples)
}

pub fn cmd_train(cfg: &CliConfig, config_path: Option<&Path>, data: &Path, out: &Path) -> Result<Selection> {
    let _lock = RunLock::acquire(out)?;
    let manifest = RunManifest::start("train", config_path, cfg.seed, out);
    let samples = load_world_samples(cfg, data)?;
    let generator = cfg.report_generator()?;
    let dataset = prepare_dataset(&generator, &samples, cfg.splits)?;
    tracing::info!(
        generator = generator.id(),
        source = %cfg.train.source,
        disagreements = dataset.disagreements(),
        "labelled dataset"
    );
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let mut log = BufWriter::new(fs::File::create(out.join(TRAIN_LOG))?);
    let mut log_error = None;
    let outcome = train_cvla(&dataset, &cfg.train, |entry| {
        if log_error.is_none() {
            let line = serde_json::to_string(entry).map_err(anyhow::Error::from);
            if let Err(e) = line.and_then(|l| writeln!(log, "{l}").map_err(Into::into)) {
                log_error = Some(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.context("writing training log"));
    }
    log.flush()?;
    let mut entries = Vec::new();
    for ck in &outcome.checkpoints {
        let rel = format!("{CHECKPOINT_DIR}/step_{:07}.json", ck.step());
        write_json(&out.join(&rel), ck)?;
        entries.push(CheckpointEntry { step: ck.step(), val_psnr: ck.val_psnr, path: rel });
    }
    write_json(&out.join(CHECKPOINT_INDEX), &entries)?;
    let best = select_checkpoint(&outcome.checkpoints)?;
    let selection = Selection {
        generator_id: generator.id().to_string(),
        source: cfg.train.source.to_string(),
        selected: entries[best].clone(),
        latest: entries[entries.len() - 1].clone(),
        aborted: outcome.aborted,
        label_disagreements: dataset.disagreements(),
    };
    write_json(&out.join(SELECTED), &selection)?;
    tracing::info!(step = selection.selected.step, val_psnr = selection.selected.val_psnr, "selected checkpoint");
    manifest.finish()?;
    Ok(selection)
}

/// A trained model: a run directory (its selected checkpoint) or a file.
#[derive(Debug, Clone)]
pub enum ModelRef {
    RunDir(PathBuf),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    Selected,
    Latest,
}

pub fn load_checkpoint(model: &ModelRef, pick: Pick) -> Result<TrainedCheckpoint> {
    match model {
        ModelRef::File(path) => read_json(path),
        ModelRef::RunDir(dir) => {
            let sel: Selection = read_json(&dir.join(SELECTED))?;
            let entry = match pick {
                Pick::Selected => sel.selected,
                Pick::Latest => sel.latest,
            };
            read_json(&dir.join(entry.path))
        }
    }
}

#[derive(Debug, Clone)]
pub enum QuerySource {
    Image(PathBuf),
    Dataset(PathBuf),
}

struct Query {
    id: usize,
    image: Image,
    gt_regions: Option<BTreeMap<usize, BBox>>,
}

fn load_queries(cfg: &CliConfig, source: &QuerySource) -> Result<Vec<Query>> {
    match source {
        QuerySource::Image(path) => Ok(vec![Query { id: 0, image: Image::read_pgm(path)?, gt_regions: None }]),
        QuerySource::Dataset(dir) => {
            let samples = load_world_samples(cfg, dir)?;
            let splits = cfg.splits.assign(samples.len()).map_err(|e| config_error(e.to_string()))?;
            let limit = cfg.explain.limit.unwrap_or(usize::MAX);
            Ok(samples
                .into_iter()
                .enumerate()
                .filter(|(i, _)| splits[*i] == cfg.explain.split)
                .take(limit)
                .map(|(id, s)| Query { id, image: s.image, gt_regions: Some(s.gt_regions) })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedRecord {
    #[serde(flatten)]
    pub record: CounterfactualRecord,
    pub frames: Vec<DiffFrame>,
    pub localization: BTreeMap<String, Localization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub query_id: usize,
    pub record: Option<String>,
    pub panel: Option<String>,
    pub n_edits: usize,
    pub note: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub n: usize,
    pub mean_iou: f64,
    pub mean_mass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainMetrics {
    pub generator_id: String,
    pub checkpoint_step: u64,
    pub success: SuccessReport,
    /// Over successful edits whose finding has a ground-truth region.
    pub localization: BTreeMap<String, LocalizationSummary>,
}

pub const RECORDS_DIR: &str = "records";
pub const METRICS: &str = "metrics.json";
pub const INDEX: &str = "index.json";

fn save_record(out: &Path, rec: &CounterfactualRecord, frames: &[DiffFrame]) -> Result<String> {
    let stem = format!("{:05}", rec.query_id);
    rec.query.write_pgm(&out.join(format!("images/{stem}_query.pgm")))?;
    rec.reconstruction.write_pgm(&out.join(format!("images/{stem}_reconstruction.pgm")))?;
    for (edit, frame) in rec.edits.iter().zip(frames) {
        edit.counterfactual.write_pgm(&out.join(format!("images/{stem}_rm_{}.pgm", edit.finding)))?;
        write_json(&out.join(format!("frames/{stem}_rm_{}.json", edit.finding)), frame)?;
    }
    let panel = format!("panels/{stem}.pgm");
    emit_panel(rec, frames)?.write_pgm(&out.join(&panel))?;
    Ok(panel)
}

pub fn cmd_explain(
    cfg: &CliConfig,
    config_path: Option<&Path>,
    model: &ModelRef,
    queries: &QuerySource,
    out: &Path,
) -> Result<ExplainMetrics> {
    let _lock = RunLock::acquire(out)?;
    let manifest = RunManifest::start("explain", config_path, cfg.seed, out);
    for sub in [RECORDS_DIR, "images", "frames", "panels"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let generator = cfg.report_generator()?;
    let ck = load_checkpoint(model, Pick::Selected)?;
    if ck.generator_id != generator.id() {
        tracing::warn!(trained_for = %ck.generator_id, explaining = generator.id(), "model was trained for another generator");
    }
    let (schedule, net) = ck.checkpoint.restore()?;
    let vocab = generator.vocabulary().clone();
    let restrict = if cfg.explain.findings.is_empty() {
        None
    } else {
        let names: Vec<&str> = cfg.explain.findings.iter().map(String::as_str).collect();
        Some(vocab.vector_of(&names)?)
    };
    let explainer = Explainer {
        ddim_steps: cfg.explain.ddim_steps,
        inversion: cfg.explain.inversion,
        restrict,
        ..Explainer::new(&net, &schedule, &generator)?
    };
    let queries = load_queries(cfg, queries)?;
    if queries.is_empty() {
        bail!("no queries selected");
    }
    let refs: Vec<(usize, &Image)> = queries.iter().map(|q| (q.id, &q.image)).collect();
    let results = explainer.explain_all(&refs);

    let mut index = Vec::new();
    let mut records = Vec::new();
    let mut loc_acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for (q, result) in queries.iter().zip(results) {
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(query = q.id, error = %e, "explanation failed");
                index.push(IndexEntry {
                    query_id: q.id,
                    record: None,
                    panel: None,
                    n_edits: 0,
                    note: None,
                    error: Some(e.to_string()),
                });
                continue;
            }
        };
        let frames = record_frames(&rec, &cfg.frames)?;
        let mut localization = BTreeMap::new();
        if let Some(regions) = &q.gt_regions {
            for (i, l) in localization_score(&rec, regions, &cfg.frames)? {
                let succeeded = rec.edits.iter().any(|e| e.removed == i && e.success);
                if succeeded {
                    let acc = loc_acc.entry(l.finding.clone()).or_default();
                    acc.0 += 1;
                    acc.1 += l.iou;
                    acc.2 += l.mass_fraction;
                }
                localization.insert(vocab.name(i).to_string(), l);
            }
        }
        let panel = save_record(out, &rec, &frames)?;
        let rel = format!("{RECORDS_DIR}/{:05}.json", rec.query_id);
        let note = rec.edits.is_empty().then(|| "no findings to remove".to_string());
        index.push(IndexEntry {
            query_id: rec.query_id,
            record: Some(rel.clone()),
            panel: Some(panel),
            n_edits: rec.edits.len(),
            note,
            error: None,
        });
        let explained = ExplainedRecord { record: rec, frames, localization };
        write_json(&out.join(&rel), &explained)?;
        records.push(explained.record);
    }
    write_json(&out.join(INDEX), &index)?;
    if records.is_empty() {
        bail!("every query failed; see {}", out.join(INDEX).display());
    }
    let metrics = ExplainMetrics {
        generator_id: generator.id().to_string(),
        checkpoint_step: ck.step(),
        success: success_rate(&records)?,
        localization: loc_acc
            .into_iter()
            .map(|(k, (n, iou, mass))| {
                (k, LocalizationSummary { n, mean_iou: iou / n as f64, mean_mass_fraction: mass / n as f64 })
            })
            .collect(),
    };
    write_json(&out.join(METRICS), &metrics)?;
    tracing::info!(
        queries = metrics.success.n_images,
        manipulations = metrics.success.n_manipulations,
        success_rate = metrics.success.success_rate,
        "explained"
    );
    manifest.finish()?;
    Ok(metrics)
}

pub const EVALUATION: &str = "evaluation.json";

/// Recounts success from the stored records of an explain run.
pub fn cmd_evaluate(run_dir: &Path) -> Result<SuccessReport> {
    let dir = run_dir.join(RECORDS_DIR);
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if paths.is_empty() {
        bail!("no records found under {}", dir.display());
    }
    paths.sort();
    let _lock = RunLock::acquire(run_dir)?;
    let records =
        paths.iter().map(|p| read_json::<ExplainedRecord>(p).map(|r| r.record)).collect::<Result<Vec<_>>>()?;
    let report = success_rate(&records)?;
    if let Ok(stored) = read_json::<ExplainMetrics>(&run_dir.join(METRICS)) {
        if stored.success.n_success != report.n_success || stored.success.n_manipulations != report.n_manipulations {
            bail!(
                "stored metrics report {}/{} but records recount to {}/{}",
                stored.success.n_success,
                stored.success.n_manipulations,
                report.n_success,
                report.n_manipulations
            );
        }
    }
    write_json(&run_dir.join(EVALUATION), &report)?;
    Ok(report)
}

pub const ABLATION: &str = "ablation.json";

/// Scores tailored-best, tailored-late and gt models on the same queries.
pub fn cmd_ablate(
    cfg: &CliConfig,
    config_path: Option<&Path>,
    data: &Path,
    tailored: &ModelRef,
    gt: &ModelRef,
    out: &Path,
) -> Result<AblationReport> {
    let _lock = RunLock::acquire(out)?;
    let manifest = RunManifest::start("ablate", config_path, cfg.seed, out);
    let generator = cfg.report_generator()?;
    let best = load_checkpoint(tailored, Pick::Selected)?;
    let late = load_checkpoint(tailored, Pick::Latest)?;
    let gt_ck = load_checkpoint(gt, Pick::Selected)?;
    let queries = load_queries(cfg, &QuerySource::Dataset(data.to_path_buf()))?;
    let refs: Vec<(usize, &Image)> = queries.iter().map(|q| (q.id, &q.image)).collect();
    let settings = ExplainSettings { ddim_steps: cfg.explain.ddim_steps, inversion: cfg.explain.inversion };
    let variants =
        [(ModelVariant::TailoredBest, &best), (ModelVariant::TailoredLate, &late), (ModelVariant::Gt, &gt_ck)];
    let (report, _) = run_ablation(&generator, &variants, &refs, &settings)?;
    write_json(&out.join(ABLATION), &report)?;
    manifest.finish()?;
    Ok(report)
}

pub fn default_sweep_levels() -> Vec<f64> {
    (1..=25).map(|i| f64::from(i) * 10.0).collect()
}

pub fn cmd_sweep(cfg: &CliConfig, query: &Path, counterfactual: &Path, levels: &[f64]) -> Result<Vec<SweepRow>> {
    let q = Image::read_pgm(query)?;
    let c = Image::read_pgm(counterfactual)?;
    Ok(sweep_threshold(&q, &c, &cfg.frames, levels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutput {
    pub generator_id: String,
    pub report: Report,
    pub findings: Vec<String>,
    pub prompt: String,
}

pub fn cmd_report(cfg: &CliConfig, image: &Path) -> Result<ReportOutput> {
    let generator = cfg.report_generator()?;
    let img = Image::read_pgm(image)?;
    let report = generator.generate(&img)?;
    let findings = generator.label(&report)?;
    Ok(ReportOutput {
        generator_id: generator.id().to_string(),
        findings: findings.names(generator.vocabulary()).into_iter().map(String::from).collect(),
        prompt: reorganize_prompt(&findings, generator.vocabulary()),
        report,
    })
}
