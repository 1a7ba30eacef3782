//! One JSON config per run; command-line flags override file values.

use std::fmt;
use std::path::{Path, PathBuf};

use cvla::blackbox::{GeneratorSpec, ReportGenerator};
use cvla::cvla::{Split, SplitSizes, TrainRunConfig};
use cvla::diffusion::InversionConfig;
use cvla::frames::FrameConfig;
use cvla::synthworld::{validate_prevalence, WorldConfig, DEFAULT_PREVALENCE};
use serde::{Deserialize, Serialize};

/// A problem with the configuration rather than with the run itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Whether any error in the chain is a [`ConfigError`].
pub fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| e.is::<ConfigError>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prevalence {
    Uniform(f64),
    PerFinding(Vec<f64>),
}

impl Prevalence {
    pub fn resolve(&self, n_findings: usize) -> Vec<f64> {
        match self {
            Self::Uniform(p) => vec![*p; n_findings],
            Self::PerFinding(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub ddim_steps: usize,
    pub inversion: InversionConfig,
    pub split: Split,
    /// Explain at most this many queries of the split.
    pub limit: Option<usize>,
    /// Only remove these findings; empty means all inferred findings.
    pub findings: Vec<String>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 25,
            inversion: InversionConfig::default(),
            split: Split::Test,
            limit: None,
            findings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Root seed; the world and training streams derive from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub prevalence: Prevalence,
    pub n_samples: usize,
    pub splits: SplitSizes,
    /// Shipped generator id: "a", "b" or "reference".
    pub generator: String,
    /// A generator spec file, used instead of `generator` when set.
    pub generator_file: Option<PathBuf>,
    pub train: TrainRunConfig,
    pub explain: ExplainConfig,
    pub frames: FrameConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            prevalence: Prevalence::Uniform(DEFAULT_PREVALENCE),
            n_samples: 600,
            splits: SplitSizes::default(),
            generator: "a".into(),
            generator_file: None,
            train: TrainRunConfig::default(),
            explain: ExplainConfig::default(),
            frames: FrameConfig::default(),
        }
    }
}

/// Flag values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub source: Option<String>,
    pub generator: Option<String>,
    pub steps: Option<u64>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub blur: Option<usize>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies overrides, propagates the root seed, and validates.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.world.rng_seed = self.seed;
        self.train.seed = self.seed;
        if let Some(src) = &o.source {
            self.train.source = src.parse().map_err(|e| config_error(format!("{e}")))?;
        }
        if let Some(g) = &o.generator {
            self.generator = g.clone();
            self.generator_file = None;
        }
        if let Some(steps) = o.steps {
            self.train.steps = steps;
            self.train.checkpoint_every = self.train.checkpoint_every.min(steps.max(1));
        }
        if let Some(k) = o.k {
            self.frames.k = k;
        }
        if let Some(l) = o.threshold {
            self.frames.threshold = l;
        }
        if let Some(b) = o.blur {
            self.frames.blur_size = b;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: cvla::Result<()>| r.map_err(|e| config_error(e.to_string()));
        check(self.world.validate())?;
        let vocab = self.world.vocabulary().map_err(|e| config_error(e.to_string()))?;
        check(validate_prevalence(&self.world, &self.prevalence.resolve(vocab.len())))?;
        check(self.train.validate())?;
        check(self.frames.validate())?;
        if self.n_samples == 0 {
            return Err(config_error("n_samples must be at least 1"));
        }
        if self.explain.ddim_steps == 0 {
            return Err(config_error("explain.ddim_steps must be at least 1"));
        }
        for f in &self.explain.findings {
            check(vocab.require(f).map(|_| ()))?;
        }
        self.generator_spec()?;
        Ok(())
    }

    pub fn generator_spec(&self) -> anyhow::Result<GeneratorSpec> {
        let spec = match &self.generator_file {
            Some(path) => GeneratorSpec::from_json_file(path).map_err(|e| config_error(e.to_string()))?,
            None => GeneratorSpec::shipped(&self.generator, self.world.image_size)
                .map_err(|e| config_error(e.to_string()))?,
        };
        if spec.image_size != self.world.image_size {
            return Err(config_error(format!(
                "generator expects {}px images but the world renders {}px",
                spec.image_size, self.world.image_size
            )));
        }
        Ok(spec)
    }

    pub fn report_generator(&self) -> anyhow::Result<ReportGenerator> {
        let vocab = self.world.vocabulary().map_err(|e| config_error(e.to_string()))?;
        ReportGenerator::new(self.generator_spec()?, vocab).map_err(|e| config_error(e.to_string()))
    }
}
