//! Versioned JSON checkpoints holding everything needed to rebuild a
//! denoiser: schedule, vocabulary, network shape and named parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Denoiser, NetConfig};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::tape::ParamStore;
use crate::error::{Error, Result};
use crate::findings::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "cvla-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub schedule: ScheduleConfig,
    pub vocabulary: Vocabulary,
    pub net: NetConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture(step: u64, schedule: &NoiseSchedule, vocabulary: &Vocabulary, net: &Denoiser) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            schedule: schedule.config(),
            vocabulary: vocabulary.clone(),
            net: net.config().clone(),
            params: net.params().clone(),
        }
    }

    /// Rebuilds the schedule and denoiser, checking that the pieces agree.
    pub fn restore(&self) -> Result<(NoiseSchedule, Denoiser)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                self.format, self.version
            )));
        }
        if self.net.n_findings != self.vocabulary.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} findings", self.vocabulary.len()),
                got: format!("{} findings", self.net.n_findings),
            });
        }
        if self.net.t_train != self.schedule.t_train {
            return Err(Error::invalid("network and schedule disagree on t_train"));
        }
        let schedule = NoiseSchedule::new(self.schedule)?;
        let net = Denoiser::from_params(self.net.clone(), self.params.clone())?;
        if !net.params().all_finite() {
            return Err(Error::Parse("checkpoint contains non-finite parameters".into()));
        }
        Ok((schedule, net))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
