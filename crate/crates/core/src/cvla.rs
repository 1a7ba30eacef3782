//! The cyclic explanation loop: label images with the black-box report
//! generator, train a conditional denoiser on those labels, then remove a
//! finding from a query by DDIM inversion under its inferred prompt and
//! resampling under the edited prompt. The regenerated report tells whether
//! the edit removed what the generator saw.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{reorganize_prompt, Report, ReportGenerator};
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::sampler::{ddim_invert, reconstruct, sample, InversionConfig};
use crate::diffusion::train::{train_step, Adam, AdamConfig};
use crate::diffusion::{psnr, Denoiser, NetConfig, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::findings::{FindingVector, Vocabulary};
use crate::image::{BBox, Image};
use crate::rng;
use crate::synthworld::PhantomSample;

/// Which labels condition training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelSource {
    /// The generator's own inferred findings.
    #[default]
    #[serde(rename = "tailored")]
    Tailored,
    #[serde(rename = "gt")]
    GroundTruth,
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tailored" => Ok(Self::Tailored),
            "gt" | "ground_truth" => Ok(Self::GroundTruth),
            other => Err(Error::invalid(format!("unknown label source {other:?}, expected tailored or gt"))),
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tailored => "tailored",
            Self::GroundTruth => "gt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Trailing validation and test counts; everything before them trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { val: 40, test: 100 }
    }
}

impl SplitSizes {
    /// Split membership for `n` records in dataset order.
    pub fn assign(&self, n: usize) -> Result<Vec<Split>> {
        if self.val + self.test >= n {
            return Err(Error::invalid(format!(
                "{} validation and {} test records leave no training data out of {n}",
                self.val, self.test
            )));
        }
        let train_end = n - self.val - self.test;
        Ok((0..n)
            .map(|i| match i {
                i if i < train_end => Split::Train,
                i if i < train_end + self.val => Split::Val,
                _ => Split::Test,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    #[serde(skip)]
    pub image: Image,
    pub inferred: FindingVector,
    pub prompt: String,
    pub gt: FindingVector,
    pub gt_regions: BTreeMap<usize, BBox>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailoredDataset {
    pub generator_id: String,
    pub vocabulary: Vocabulary,
    pub records: Vec<DatasetRecord>,
}

impl TailoredDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Image/label pairs of one split. This is the only path from the
    /// dataset into training, so tailored runs never see ground truth.
    pub fn labelled(&self, split: Split, source: LabelSource) -> Vec<(Image, FindingVector)> {
        self.split(split)
            .map(|r| {
                let label = match source {
                    LabelSource::Tailored => r.inferred.clone(),
                    LabelSource::GroundTruth => r.gt.clone(),
                };
                (r.image.clone(), label)
            })
            .collect()
    }

    /// Records whose inferred findings differ from ground truth.
    pub fn disagreements(&self) -> usize {
        self.records.iter().filter(|r| r.inferred != r.gt).count()
    }

    pub fn image_size(&self) -> usize {
        self.records.first().map_or(0, |r| r.image.width())
    }
}

/// Runs the generator over every sample and pairs each image with the
/// findings parsed from its report.
pub fn prepare_dataset(
    generator: &ReportGenerator,
    samples: &[PhantomSample],
    sizes: SplitSizes,
) -> Result<TailoredDataset> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to label"));
    }
    let splits = sizes.assign(samples.len())?;
    let vocab = generator.vocabulary();
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let inferred =
                generator.infer(&s.image).map_err(|e| Error::Record { id: id.to_string(), source: Box::new(e) })?;
            Ok(DatasetRecord {
                id,
                image: s.image.clone(),
                prompt: reorganize_prompt(&inferred, vocab),
                inferred,
                gt: s.gt_findings.clone(),
                gt_regions: s.gt_regions.clone(),
                split: splits[id],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TailoredDataset { generator_id: generator.id().to_string(), vocabulary: vocab.clone(), records })
}

/// Network widths; the image size and vocabulary come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub channels: [usize; 3],
    pub emb_dim: usize,
    pub cond_map_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self { channels: net.channels, emb_dim: net.emb_dim, cond_map_channels: net.cond_map_channels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub source: LabelSource,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub arch: ArchConfig,
    /// DDIM steps for validation reconstructions.
    pub ddim_steps: usize,
    /// Cap on validation images scored per checkpoint.
    pub val_limit: Option<usize>,
    pub inversion: InversionConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            source: LabelSource::Tailored,
            steps: 4000,
            checkpoint_every: 1000,
            seed: 0,
            batch_size: 8,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            arch: ArchConfig::default(),
            ddim_steps: 25,
            val_limit: None,
            inversion: InversionConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 || self.steps < self.checkpoint_every {
            return Err(Error::invalid(format!(
                "need steps >= checkpoint_every >= 1, got steps {} and checkpoint_every {}",
                self.steps, self.checkpoint_every
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.ddim_steps == 0 {
            return Err(Error::invalid("ddim_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn net_config(&self, image_size: usize, n_findings: usize) -> NetConfig {
        NetConfig {
            image_size,
            channels: self.arch.channels,
            emb_dim: self.arch.emb_dim,
            cond_map_channels: self.arch.cond_map_channels,
            n_findings,
            t_train: self.schedule.t_train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCheckpoint {
    pub val_psnr: f64,
    pub source: LabelSource,
    pub generator_id: String,
    pub checkpoint: Checkpoint,
}

impl TrainedCheckpoint {
    pub fn step(&self) -> u64 {
        self.checkpoint.step
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<TrainedCheckpoint>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

/// Mean reconstruction PSNR over labelled images.
pub fn mean_reconstruction_psnr(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    pairs: &[(Image, FindingVector)],
    ddim_steps: usize,
    inversion: &InversionConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no images to reconstruct"));
    }
    let scores = pairs
        .par_iter()
        .map(|(x, c)| psnr(&reconstruct(model, schedule, x, c, ddim_steps, inversion)?, x))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains on the configured label source and scores a checkpoint every
/// `checkpoint_every` steps by validation reconstruction PSNR. A non-finite
/// loss stops training and returns the checkpoints saved so far.
pub fn train_cvla(
    dataset: &TailoredDataset,
    cfg: &TrainRunConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = dataset.labelled(Split::Train, cfg.source);
    let mut val = dataset.labelled(Split::Val, cfg.source);
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    if let Some(limit) = cfg.val_limit {
        val.truncate(limit.max(1));
    }
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    let net_cfg = cfg.net_config(dataset.image_size(), dataset.vocabulary.len());
    let mut net = Denoiser::new(net_cfg, &mut rng::substream(cfg.seed, "init"))?;
    let mut optimizer = Adam::new(cfg.adam, net.params());
    let mut rng = rng::substream(cfg.seed, "train");
    let mut checkpoints = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(train[rng.random_range(0..train.len())].clone());
        }
        let loss = match train_step(&mut net, &mut optimizer, &schedule, &batch, &mut rng, cfg.learning_rate) {
            Ok(loss) => loss,
            Err(Error::Training { step: _, reason }) if !checkpoints.is_empty() => {
                tracing::warn!(step, %reason, "training aborted");
                return Ok(TrainOutcome { checkpoints, aborted: Some(format!("step {step}: {reason}")) });
            }
            Err(Error::Training { step: _, reason }) => return Err(Error::Training { step, reason }),
            Err(e) => return Err(e),
        };
        let mut val_psnr = None;
        if step % cfg.checkpoint_every == 0 {
            let score = mean_reconstruction_psnr(&net, &schedule, &val, cfg.ddim_steps, &cfg.inversion)?;
            tracing::info!(step, loss, val_psnr = score, "checkpoint");
            val_psnr = Some(score);
            checkpoints.push(TrainedCheckpoint {
                val_psnr: score,
                source: cfg.source,
                generator_id: dataset.generator_id.clone(),
                checkpoint: Checkpoint::capture(step, &schedule, &dataset.vocabulary, &net),
            });
        }
        on_step(&StepLog { step, loss, val_psnr });
    }
    Ok(TrainOutcome { checkpoints, aborted: None })
}

/// Index of the highest validation PSNR, earliest on ties.
pub fn select_checkpoint(checkpoints: &[TrainedCheckpoint]) -> Result<usize> {
    let first = checkpoints.first().ok_or_else(|| Error::invalid("no checkpoints to select from"))?;
    let mut best = (0, first.val_psnr);
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        if ck.val_psnr > best.1 {
            best = (i, ck.val_psnr);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub removed: usize,
    pub finding: String,
    pub edited_prompt: String,
    #[serde(skip)]
    pub counterfactual: Image,
    pub regenerated_report: Report,
    pub regenerated: FindingVector,
    /// The removed finding is absent from the regenerated findings.
    pub success: bool,
    /// Every other originally inferred finding is still reported.
    pub preserved: bool,
    pub psnr_to_query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub query_id: usize,
    #[serde(skip)]
    pub query: Image,
    pub original_report: Report,
    pub inferred: FindingVector,
    pub prompt: String,
    #[serde(skip)]
    pub reconstruction: Image,
    pub psnr_reconstruction: f64,
    pub edits: Vec<EditRecord>,
}

/// The regenerated report and flags for one counterfactual.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicOutcome {
    pub report: Report,
    pub regenerated: FindingVector,
    pub success: bool,
    pub preserved: bool,
}

pub fn cyclic_check(
    generator: &ReportGenerator,
    original: &FindingVector,
    removed: usize,
    counterfactual: &Image,
) -> Result<CyclicOutcome> {
    let report = generator.generate(counterfactual)?;
    let regenerated = generator.label(&report)?;
    let success = !regenerated.get(removed);
    let preserved = original.active().filter(|&i| i != removed).all(|i| regenerated.get(i));
    Ok(CyclicOutcome { report, regenerated, success, preserved })
}

/// A trained model paired with the generator it explains.
#[derive(Debug, Clone)]
pub struct Explainer<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub generator: &'a ReportGenerator,
    pub ddim_steps: usize,
    pub inversion: InversionConfig,
    /// When set, only these findings are removed.
    pub restrict: Option<FindingVector>,
}

impl<'a> Explainer<'a> {
    pub fn new(model: &'a Denoiser, schedule: &'a NoiseSchedule, generator: &'a ReportGenerator) -> Result<Self> {
        let cfg = model.config();
        if cfg.n_findings != generator.vocabulary().len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} findings", generator.vocabulary().len()),
                got: format!("{} findings", cfg.n_findings),
            });
        }
        if cfg.image_size != generator.spec().image_size {
            return Err(Error::DimensionMismatch {
                expected: format!("{0}x{0}", generator.spec().image_size),
                got: format!("{0}x{0}", cfg.image_size),
            });
        }
        Ok(Self { model, schedule, generator, ddim_steps: 25, inversion: InversionConfig::default(), restrict: None })
    }

    /// Removes `remove` from the query's inferred prompt: inverts under the
    /// original conditioning and resamples under the edited one.
    pub fn make_counterfactual(&self, query: &Image, remove: usize) -> Result<(Image, String)> {
        let inferred = self.generator.infer(query)?;
        if remove >= inferred.len() || !inferred.get(remove) {
            return Err(Error::invalid(format!("finding {remove} is not reported for this query; nothing to remove")));
        }
        let latent = ddim_invert(self.model, self.schedule, query, &inferred, self.ddim_steps, &self.inversion)?;
        let edited = inferred.with(remove, false);
        let image = sample(self.model, self.schedule, &latent, &edited, self.ddim_steps)?;
        Ok((image, reorganize_prompt(&edited, self.generator.vocabulary())))
    }

    /// Reconstruction plus one counterfactual per inferred finding (within
    /// `restrict`), each checked against the regenerated report. The
    /// inversion is shared.
    pub fn explain(&self, query_id: usize, query: &Image) -> Result<CounterfactualRecord> {
        let vocab = self.generator.vocabulary();
        let original_report = self.generator.generate(query)?;
        let inferred = self.generator.label(&original_report)?;
        let latent = ddim_invert(self.model, self.schedule, query, &inferred, self.ddim_steps, &self.inversion)?;
        let reconstruction = sample(self.model, self.schedule, &latent, &inferred, self.ddim_steps)?;
        let psnr_reconstruction = psnr(&reconstruction, query)?;
        let mut edits = Vec::new();
        let targets: Vec<usize> = match &self.restrict {
            Some(only) => inferred.active().filter(|&i| only.get(i)).collect(),
            None => inferred.active().collect(),
        };
        for removed in targets {
            let edited = inferred.with(removed, false);
            let counterfactual = sample(self.model, self.schedule, &latent, &edited, self.ddim_steps)?;
            let outcome = cyclic_check(self.generator, &inferred, removed, &counterfactual)?;
            edits.push(EditRecord {
                removed,
                finding: vocab.name(removed).to_string(),
                edited_prompt: reorganize_prompt(&edited, vocab),
                psnr_to_query: psnr(&counterfactual, query)?,
                counterfactual,
                regenerated_report: outcome.report,
                regenerated: outcome.regenerated,
                success: outcome.success,
                preserved: outcome.preserved,
            });
        }
        Ok(CounterfactualRecord {
            query_id,
            query: query.clone(),
            original_report,
            prompt: reorganize_prompt(&inferred, vocab),
            inferred,
            reconstruction,
            psnr_reconstruction,
            edits,
        })
    }

    /// [`Self::explain`] over many queries, in input order.
    pub fn explain_all(&self, queries: &[(usize, &Image)]) -> Vec<Result<CounterfactualRecord>> {
        queries.par_iter().map(|(id, img)| self.explain(*id, img)).collect()
    }
}
