//! The run configuration file (TOML).

use std::path::{Path, PathBuf};

use harmonize_core::diffusion::TranslateOptions;
use harmonize_core::metrics::EvalOptions;
use harmonize_core::phantom::CohortSpec;
use harmonize_core::{Direction, NetDescriptor, NoiseSchedule, ScheduleSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, CliError, CliResult};

/// File name of the configuration echo written into every output directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub direction: Direction,
    /// Root seed. Training, initialization and sampling seeds are derived
    /// from it per fold, direction and subject.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    pub cohort: CohortSpec,
    pub folds: FoldLayout,
    pub schedule: ScheduleSpec,
    pub model: NetDescriptor,
    pub train: TrainConfig,
    pub data: DataOptions,
    pub translate: TranslateSettings,
    pub metrics: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            direction: Direction::SourceToTarget,
            seed: 0,
            workers: 0,
            paths: Paths::default(),
            cohort: CohortSpec::default(),
            folds: FoldLayout::default(),
            schedule: ScheduleSpec::default(),
            model: NetDescriptor::default(),
            train: TrainConfig::default(),
            data: DataOptions::default(),
            translate: TranslateSettings::default(),
            metrics: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Phantom volumes and their manifest.
    pub data_dir: PathBuf,
    /// Fold file, checkpoints, translations, metrics and reports.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldLayout {
    pub k: usize,
    pub shuffle_seed: u64,
}

impl Default for FoldLayout {
    fn default() -> Self {
        Self {
            k: 4,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Leave out training slices whose condition image is entirely zero.
    pub skip_empty_slices: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            skip_empty_slices: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSettings {
    pub mask_background: bool,
}

impl Default for TranslateSettings {
    fn default() -> Self {
        Self {
            mask_background: TranslateOptions::default().mask_background,
        }
    }
}

impl TranslateSettings {
    pub fn options(&self) -> TranslateOptions {
        TranslateOptions {
            mask_background: self.mask_background,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub direction: Option<Direction>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = o.direction {
            self.direction = d;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out_dir {
            self.paths.out_dir = out.clone();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let config = |e: harmonize_core::Error| CliError::Config(e.to_string());
        self.schedule.build().map_err(config)?;
        self.model.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        if self.cohort.subjects > 0 {
            self.cohort.base.validate().map_err(config)?;
        }
        if self.cohort.lesion_subjects > self.cohort.subjects {
            return Err(CliError::Config(
                "cohort.lesion_subjects exceeds cohort.subjects".into(),
            ));
        }
        if self.folds.k == 0 {
            return Err(CliError::Config("folds.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        self.schedule
            .build()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(CONFIG_ECHO);
        io_at(&path, std::fs::write(&path, self.to_toml()))
    }

    /// Output directory of one fold and direction.
    pub fn run_dir(&self, fold: usize) -> PathBuf {
        self.paths
            .out_dir
            .join(format!("fold-{fold}"))
            .join(self.direction.tag())
    }
}

/// Fails with a configuration error unless `dir` exists.
pub fn require_dir(dir: &Path, what: &str) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what} {} does not exist",
            dir.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "direction = \"t2s\"\n[train]\niterations = 7\n[schedule]\nsteps = 50\nkind = \"cosine\"\n",
        )
        .unwrap();
        assert_eq!(cfg.direction, Direction::TargetToSource);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.schedule.steps, 50);
        assert_eq!(cfg.folds.k, 4);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "unknown_key = 1",
            "[schedule]\nsteps = 0",
            "[train]\nlearning_rate = -1.0",
            "[folds]\nk = 0",
            "direction = \"sideways\"",
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            direction: Some(Direction::TargetToSource),
            seed: Some(9),
            workers: Some(2),
            out_dir: Some("elsewhere".into()),
        });
        assert_eq!(cfg.direction, Direction::TargetToSource);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.run_dir(1), PathBuf::from("elsewhere/fold-1/t2s"));
    }
}
