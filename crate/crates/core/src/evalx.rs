//! Scoring of counterfactual records: cyclic success counts, ablations over
//! model variants, localization against phantom ground truth, and panels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blackbox::ReportGenerator;
use crate::cvla::{CounterfactualRecord, Explainer, TrainedCheckpoint};
use crate::diffusion::InversionConfig;
use crate::error::{Error, Result};
use crate::frames::{difference_map, draw_boxes, frame_pipeline, threshold_mask, DiffFrame, FrameConfig};
use crate::image::{BBox, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub manipulations: usize,
    pub successes: usize,
}

impl Tally {
    pub fn rate(&self) -> f64 {
        if self.manipulations == 0 {
            0.0
        } else {
            self.successes as f64 / self.manipulations as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub n_images: usize,
    pub n_manipulations: usize,
    pub n_success: usize,
    pub success_rate: f64,
    pub per_finding: BTreeMap<String, Tally>,
    pub n_preserved: usize,
    pub preservation_rate: f64,
    pub mean_psnr_reconstruction: f64,
}

/// Counts successes over every edit of every record. Independent of record
/// order: counts are integers and the PSNR mean sums sorted values.
pub fn success_rate(records: &[CounterfactualRecord]) -> Result<SuccessReport> {
    if records.is_empty() {
        return Err(Error::invalid("no records to score"));
    }
    let mut per_finding: BTreeMap<String, Tally> = BTreeMap::new();
    let (mut total, mut preserved) = (Tally::default(), 0);
    for edit in records.iter().flat_map(|r| &r.edits) {
        let t = per_finding.entry(edit.finding.clone()).or_default();
        t.manipulations += 1;
        total.manipulations += 1;
        if edit.success {
            t.successes += 1;
            total.successes += 1;
        }
        preserved += usize::from(edit.preserved);
    }
    let mut psnrs: Vec<f64> = records.iter().map(|r| r.psnr_reconstruction).collect();
    psnrs.sort_by(f64::total_cmp);
    let preservation = Tally { manipulations: total.manipulations, successes: preserved };
    Ok(SuccessReport {
        n_images: records.len(),
        n_manipulations: total.manipulations,
        n_success: total.successes,
        success_rate: total.rate(),
        per_finding,
        n_preserved: preserved,
        preservation_rate: preservation.rate(),
        mean_psnr_reconstruction: psnrs.iter().sum::<f64>() / psnrs.len() as f64,
    })
}

/// `(query id, removed finding)` for every edit, in record order.
pub fn manipulation_list(records: &[CounterfactualRecord]) -> Vec<(usize, usize)> {
    records.iter().flat_map(|r| r.edits.iter().map(move |e| (r.query_id, e.removed))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "tailored-best")]
    TailoredBest,
    #[serde(rename = "tailored-late")]
    TailoredLate,
    #[serde(rename = "gt")]
    Gt,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TailoredBest => "tailored-best",
            Self::TailoredLate => "tailored-late",
            Self::Gt => "gt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub generator_id: String,
    pub variant: ModelVariant,
    pub checkpoint_step: u64,
    pub val_psnr: f64,
    pub report: SuccessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub query_ids: Vec<usize>,
    pub manipulations: Vec<(usize, usize)>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: ModelVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainSettings {
    pub ddim_steps: usize,
    pub inversion: InversionConfig,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self { ddim_steps: 25, inversion: InversionConfig::default() }
    }
}

/// Explains every query under each model variant and scores the results.
/// All rows share the query set and, because the generator fixes the
/// inferred findings, the manipulation list; this is checked.
pub fn run_ablation(
    generator: &ReportGenerator,
    variants: &[(ModelVariant, &TrainedCheckpoint)],
    queries: &[(usize, &Image)],
    settings: &ExplainSettings,
) -> Result<(AblationReport, Vec<Vec<CounterfactualRecord>>)> {
    if variants.is_empty() {
        return Err(Error::invalid("no model variants to compare"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    let mut manipulations: Option<Vec<(usize, usize)>> = None;
    for &(variant, ck) in variants {
        if ck.generator_id != generator.id() {
            return Err(Error::invalid(format!(
                "{variant} checkpoint was trained for generator {:?}, not {:?}",
                ck.generator_id,
                generator.id()
            )));
        }
        let (schedule, model) = ck.checkpoint.restore()?;
        let explainer = Explainer {
            ddim_steps: settings.ddim_steps,
            inversion: settings.inversion,
            ..Explainer::new(&model, &schedule, generator)?
        };
        let records = explainer.explain_all(queries).into_iter().collect::<Result<Vec<_>>>()?;
        let list = manipulation_list(&records);
        match &manipulations {
            Some(m) if *m != list => {
                return Err(Error::invalid(format!("{variant} produced a different manipulation list")));
            }
            Some(_) => {}
            None => manipulations = Some(list),
        }
        rows.push(AblationRow {
            generator_id: generator.id().to_string(),
            variant,
            checkpoint_step: ck.step(),
            val_psnr: ck.val_psnr,
            report: success_rate(&records)?,
        });
        all_records.push(records);
    }
    let report = AblationReport {
        query_ids: queries.iter().map(|q| q.0).collect(),
        manipulations: manipulations.unwrap_or_default(),
        rows,
    };
    Ok((report, all_records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub finding: String,
    /// IoU of the largest frame with the finding's region; 0 without frames.
    pub iou: f64,
    /// Share of above-threshold difference mass inside the region; 0 when
    /// nothing survives the threshold.
    pub mass_fraction: f64,
    pub frame: DiffFrame,
}

/// Fraction of the above-`level` mass of `map` that falls inside `region`.
pub fn mass_fraction(map: &Image, level: f64, region: &BBox) -> f64 {
    let mask = threshold_mask(map, level);
    let (mut inside, mut total) = (0.0, 0.0);
    for y in 0..map.height() {
        for x in 0..map.width() {
            if mask.get(x, y) {
                let v = map.get(x, y);
                total += v;
                if region.contains(x, y) {
                    inside += v;
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// Scores each edit whose finding has a ground-truth region.
pub fn localization_score(
    record: &CounterfactualRecord,
    gt_regions: &BTreeMap<usize, BBox>,
    cfg: &FrameConfig,
) -> Result<BTreeMap<usize, Localization>> {
    let mut out = BTreeMap::new();
    for edit in &record.edits {
        let Some(region) = gt_regions.get(&edit.removed) else { continue };
        let level = cfg.threshold_for(Some(&edit.finding));
        let map = difference_map(&record.query, &edit.counterfactual, cfg)?;
        let frame = frame_pipeline(&record.query, &edit.counterfactual, cfg, Some(&edit.finding))?;
        let iou = frame.boxes.first().map_or(0.0, |b| b.bbox.iou(region));
        out.insert(
            edit.removed,
            Localization {
                finding: edit.finding.clone(),
                iou,
                mass_fraction: mass_fraction(&map, level, region),
                frame,
            },
        );
    }
    Ok(out)
}

/// Frames for every edit of a record, in edit order.
pub fn record_frames(record: &CounterfactualRecord, cfg: &FrameConfig) -> Result<Vec<DiffFrame>> {
    record.edits.iter().map(|e| frame_pipeline(&record.query, &e.counterfactual, cfg, Some(&e.finding))).collect()
}

pub const PANEL_SEPARATOR: usize = 2;
pub const PANEL_MARKER_HEIGHT: usize = 4;
const SEPARATOR_LEVEL: f64 = 0.5;
const FAILURE_MARKER_LEVEL: f64 = 0.25;

/// Query, reconstruction, then each counterfactual with its frames drawn,
/// separated by gray bars. A strip under each counterfactual is white on
/// cyclic success and dark gray otherwise.
pub fn emit_panel(record: &CounterfactualRecord, frames: &[DiffFrame]) -> Result<Image> {
    if frames.len() != record.edits.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} frames", record.edits.len()),
            got: format!("{} frames", frames.len()),
        });
    }
    let (w, h) = (record.query.width(), record.query.height());
    record.query.ensure_same_shape(&record.reconstruction)?;
    let mut columns: Vec<(Image, Option<bool>)> =
        vec![(record.query.clone(), None), (record.reconstruction.clone(), None)];
    for (edit, frame) in record.edits.iter().zip(frames) {
        record.query.ensure_same_shape(&edit.counterfactual)?;
        columns.push((draw_boxes(&edit.counterfactual, frame, 1.0), Some(edit.success)));
    }
    let width = columns.len() * w + (columns.len() - 1) * PANEL_SEPARATOR;
    let height = h + PANEL_MARKER_HEIGHT;
    let mut panel = Image::new(width, height);
    for (i, (img, marker)) in columns.iter().enumerate() {
        let x0 = i * (w + PANEL_SEPARATOR);
        for y in 0..h {
            for x in 0..w {
                panel.set(x0 + x, y, img.get(x, y).clamp(0.0, 1.0));
            }
        }
        let level = match marker {
            Some(true) => 1.0,
            Some(false) => FAILURE_MARKER_LEVEL,
            None => 0.0,
        };
        for y in h..height {
            for x in 0..w {
                panel.set(x0 + x, y, level);
            }
        }
        if i + 1 < columns.len() {
            for y in 0..height {
                for s in 0..PANEL_SEPARATOR {
                    panel.set(x0 + w + s, y, SEPARATOR_LEVEL);
                }
            }
        }
    }
    Ok(panel)
}
