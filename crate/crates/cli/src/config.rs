//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; omitted keys take the defaults below.
//! Unknown keys are rejected so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use esplit_core::autodiff::optim::OptimizerConfig;
use esplit_core::data::{Dataset, SyntheticShapes, Task};
use esplit_core::layers::{ModelSpec, TeacherWidths};
use esplit_core::split_runtime::{ChannelProfile, ComputeProfile, SplitConfig, Timing};
use esplit_core::training::{LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds every initialization, shuffle and noise stream.
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub end2end: End2endConfig,
    pub crbq: CrbqConfig,
    pub heads: HeadsConfig,
    pub channel: ChannelProfile,
    pub split: SplitSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file (`ESDS`); synthetic shapes are generated when absent.
    pub path: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub stage1_width: usize,
    pub stage2_width: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    /// One student per value, in order; the position is its beta id.
    pub betas: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub aux_features: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct End2endConfig {
    pub betas: Vec<f64>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrbqConfig {
    pub channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub tasks: Vec<Task>,
    /// Student whose frozen encoder the heads share.
    pub base_beta_id: u16,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub timing: Timing,
    pub mobile: ComputeProfile,
    pub server: ComputeProfile,
    /// Validation samples pushed through the split pipeline.
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            end2end: End2endConfig::default(),
            crbq: CrbqConfig::default(),
            heads: HeadsConfig::default(),
            channel: ChannelProfile::default(),
            split: SplitSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, train: 2000, val: 1000, seed: 1, noise: 0.08 }
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { stage1_width: 8, stage2_width: 16, epochs: 8, lr: LrSchedule::constant(3e-3), batch_size: 32 }
    }
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            hidden: 16,
            betas: vec![0.33, 1.3, 5.2],
            alpha: 0.5,
            tau: 1.0,
            stage1_epochs: 6,
            stage2_epochs: 4,
            lr: LrSchedule::constant(3e-3),
            batch_size: 32,
            aux_features: false,
        }
    }
}

impl Default for End2endConfig {
    fn default() -> Self {
        Self { betas: vec![5e-4, 2e-3, 3e-3, 4e-3, 5e-3, 6e-3, 8e-3], epochs: 6, lr: LrSchedule::constant(3e-3), batch_size: 32 }
    }
}

impl Default for CrbqConfig {
    fn default() -> Self {
        Self { channels: 4, hidden: 16, epochs: 6, lr: LrSchedule::constant(3e-3), batch_size: 32 }
    }
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Class, Task::Parity],
            base_beta_id: 0,
            epochs: 3,
            lr: LrSchedule::constant(3e-3),
            batch_size: 32,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { timing: Timing::CostModel, mobile: ComputeProfile::mobile(), server: ComputeProfile::server(), samples: 1000 }
    }
}

fn positive(what: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        return Err(CliError::Config(format!("{what} must be at least 1")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        positive("data.train", self.data.train)?;
        positive("data.val", self.data.val)?;
        positive("student.latent_channels", self.student.latent_channels)?;
        positive("crbq.channels", self.crbq.channels)?;
        positive("split.samples", self.split.samples)?;
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(CliError::Config(format!("data.noise must be non-negative, got {}", self.data.noise)));
        }
        if self.student.betas.is_empty() {
            return Err(CliError::Config("student.betas is empty".into()));
        }
        if self.heads.base_beta_id as usize >= self.student.betas.len() {
            return Err(CliError::Config(format!(
                "heads.base_beta_id {} has no student (only {} betas)",
                self.heads.base_beta_id,
                self.student.betas.len()
            )));
        }
        for beta in self.student.betas.iter().chain(&self.end2end.betas) {
            self.train(*beta, 1, &self.teacher.lr, 1).validate()?;
        }
        self.student_train(0).validate()?;
        self.split_config().validate()?;
        Ok(())
    }

    fn train(&self, beta: f64, epochs: usize, lr: &LrSchedule, batch_size: usize) -> TrainConfig {
        TrainConfig {
            beta,
            alpha: self.student.alpha,
            tau: self.student.tau,
            lr: *lr,
            batch_size,
            epochs,
            seed: self.seed,
            optimizer: OptimizerConfig::adam(),
            aux_features: self.student.aux_features,
        }
    }

    pub fn teacher_spec(&self, data: &Dataset) -> ModelSpec {
        let widths = TeacherWidths { stage1: self.teacher.stage1_width, stage2: self.teacher.stage2_width };
        ModelSpec::teacher(data.shape, widths, data.num_classes)
    }

    pub fn teacher_train(&self) -> TrainConfig {
        let t = &self.teacher;
        self.train(TrainConfig::default().beta, t.epochs, &t.lr, t.batch_size)
    }

    pub fn beta(&self, beta_id: u16) -> CliResult<f64> {
        self.student.betas.get(beta_id as usize).copied().ok_or_else(|| {
            CliError::Config(format!("beta id {beta_id} out of range ({} betas configured)", self.student.betas.len()))
        })
    }

    pub fn student_train(&self, stage: u8) -> TrainConfig {
        let s = &self.student;
        let epochs = if stage == 2 { s.stage2_epochs } else { s.stage1_epochs };
        self.train(s.betas[0], epochs, &s.lr, s.batch_size)
    }

    pub fn end2end_train(&self, beta: f64) -> TrainConfig {
        let e = &self.end2end;
        self.train(beta, e.epochs, &e.lr, e.batch_size)
    }

    pub fn crbq_train(&self) -> TrainConfig {
        let c = &self.crbq;
        self.train(TrainConfig::default().beta, c.epochs, &c.lr, c.batch_size)
    }

    pub fn head_train(&self) -> TrainConfig {
        let h = &self.heads;
        self.train(TrainConfig::default().beta, h.epochs, &h.lr, h.batch_size)
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            channel: self.channel,
            mobile: self.split.mobile.clone(),
            server: self.split.server.clone(),
            timing: self.split.timing,
        }
    }

    /// Training and validation sets: the first `train` samples and the `val`
    /// samples after them (file) or from a disjoint index range (synthetic).
    pub fn datasets(&self) -> CliResult<(Dataset, Dataset)> {
        let d = &self.data;
        match &d.path {
            Some(p) => {
                let all = Dataset::load(p).map_err(|e| CliError::from_core_at(p, e))?;
                if all.len() < d.train + d.val {
                    return Err(CliError::Config(format!(
                        "{} holds {} samples, config asks for {} + {}",
                        p.display(),
                        all.len(),
                        d.train,
                        d.val
                    )));
                }
                Ok((all.subset(0..d.train), all.subset(d.train..d.train + d.val)))
            }
            None => {
                let gen = SyntheticShapes { seed: d.seed, noise: d.noise, ..Default::default() };
                Ok((gen.generate(0, d.train), gen.generate(1 << 40, d.val)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[student]\nbetas = [0.1, 0.2]\n[channel]\ndata_rate_bps = 1000.0\n")
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.student.betas, vec![0.1, 0.2]);
        assert_eq!(c.student.alpha, 0.5);
        assert_eq!(c.channel.data_rate_bps, 1000.0);
        assert_eq!(c.channel.overhead_bytes, 0);
    }

    #[test]
    fn rejects_typos_and_invalid_values() {
        for bad in [
            "sede = 3",
            "[student]\nbeta = [0.1]",
            "[student]\nbetas = []",
            "[student]\nbetas = [-1.0]",
            "[channel]\ndata_rate_bps = 0.0",
            "[heads]\nbase_beta_id = 9",
            "[data]\ntrain = 0",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(CliError::Config(_))), "{bad}");
        }
    }
}
