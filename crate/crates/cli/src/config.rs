//! Run configuration: defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use duofield::metrics::Split;
use duofield::render::MOTION_THRESHOLD;
use duofield::train::{Toggle, TrainConfig};
use duofield::{Error, Result};

/// Flags shared by every subcommand. Each has a config-file key of the same
/// name.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file whose keys mirror these flags
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// moving-box, two-cars, shadow-caster or static-only
    #[arg(long, value_name = "NAME")]
    pub scene: Option<String>,
    /// Total optimization steps (default: derived from the epoch count)
    #[arg(long, value_name = "N")]
    pub steps: Option<u64>,
    /// Epochs of the robust static-only phase; 0 skips it
    #[arg(long, value_name = "N")]
    pub init_epochs: Option<u32>,
    /// Inlier percentile of the robust kernel
    #[arg(long, value_name = "F")]
    pub robust_fraction: Option<f64>,
    /// Dynamic-opacity threshold of the motion mask
    #[arg(long, value_name = "F")]
    pub threshold: Option<f64>,
    /// Component to disable: depth, sem, robust, road, sigmaD or fgmask (repeatable)
    #[arg(long, value_name = "NAME")]
    pub toggle: Vec<String>,
    /// Frames to evaluate: train, holdout or all
    #[arg(long, value_name = "SPLIT")]
    pub split: Option<String>,
    /// Single frame to decompose (default: every frame)
    #[arg(long, value_name = "N")]
    pub frame: Option<usize>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scene: Option<String>,
    pub steps: Option<u64>,
    pub init_epochs: Option<u32>,
    pub robust_fraction: Option<f64>,
    pub threshold: Option<f64>,
    pub toggle: Option<Vec<String>>,
    pub split: Option<String>,
    pub frame: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub scene: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub init_epochs: u32,
    pub robust_fraction: f64,
    pub threshold: f64,
    pub toggle: Vec<String>,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

impl RunConfig {
    /// Merges defaults, the config file named by `flags.config` and the
    /// flags themselves, in that order of precedence. Without an explicit
    /// output directory, runs go to `runs/<command>-<scene>-seed<seed>`.
    pub fn resolve(flags: &Flags, command: &str) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let defaults = TrainConfig::desk();
        let toggle = if flags.toggle.is_empty() { file.toggle.unwrap_or_default() } else { flags.toggle.clone() };
        let seed = flags.seed.or(file.seed).unwrap_or(defaults.seed);
        let scene = flags.scene.clone().or(file.scene).unwrap_or(defaults.scene);
        let rc = RunConfig {
            out: flags.out.clone().or(file.out).unwrap_or_else(|| format!("runs/{command}-{scene}-seed{seed}").into()),
            seed,
            scene,
            steps: flags.steps.or(file.steps),
            init_epochs: flags.init_epochs.or(file.init_epochs).unwrap_or(defaults.init_epochs),
            robust_fraction: flags.robust_fraction.or(file.robust_fraction).unwrap_or(defaults.robust_fraction),
            threshold: flags.threshold.or(file.threshold).unwrap_or(MOTION_THRESHOLD),
            toggle,
            split: flags.split.clone().or(file.split).unwrap_or_else(|| "holdout".into()),
            frame: flags.frame.or(file.frame),
        };
        rc.validate()?;
        Ok(rc)
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles()?;
        self.split()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        self.train_config(&[])?;
        Ok(())
    }

    pub fn toggles(&self) -> Result<Vec<Toggle>> {
        let mut out: Vec<Toggle> = self.toggle.iter().map(|t| Toggle::parse(t)).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn split(&self) -> Result<Split> {
        Split::parse(&self.split)
    }

    /// Training configuration with exactly the components in `disabled`
    /// switched off.
    pub fn train_config(&self, disabled: &[Toggle]) -> Result<TrainConfig> {
        let mut off = disabled.to_vec();
        off.sort();
        off.dedup();
        let cfg = TrainConfig {
            scene: self.scene.clone(),
            seed: self.seed,
            steps: self.steps,
            init_epochs: self.init_epochs,
            robust_fraction: self.robust_fraction,
            disabled: off,
            ..TrainConfig::desk()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\nscene = \"two-cars\"\ninit-epochs = 0\ntoggle = [\"road\"]\n").unwrap();
        let flags = Flags { config: Some(path), seed: Some(9), ..Flags::default() };
        let rc = RunConfig::resolve(&flags, "train").unwrap();
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.scene, "two-cars");
        assert_eq!(rc.init_epochs, 0);
        assert_eq!(rc.toggles().unwrap(), vec![Toggle::Road]);
        assert_eq!(rc.threshold, 0.5);
        assert_eq!(rc.out, PathBuf::from("runs/train-two-cars-seed9"));
    }

    #[test]
    fn resolved_config_round_trips_through_a_file() {
        let flags = Flags { steps: Some(40), toggle: vec!["sigmaD".into(), "sem".into()], ..Flags::default() };
        let rc = RunConfig::resolve(&flags, "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, rc.to_toml()).unwrap();
        let again = RunConfig::resolve(&Flags { config: Some(path), ..Flags::default() }, "ablate").unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            Flags { toggle: vec!["wings".into()], ..Flags::default() },
            Flags { robust_fraction: Some(1.5), ..Flags::default() },
            Flags { threshold: Some(1.0), ..Flags::default() },
            Flags { scene: Some("nowhere".into()), ..Flags::default() },
            Flags { split: Some("test".into()), ..Flags::default() },
        ];
        for flags in bad {
            assert!(matches!(RunConfig::resolve(&flags, "train"), Err(Error::Config(_))), "{flags:?}");
        }
    }

    #[test]
    fn unknown_file_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "learning_rate = 3\n").unwrap();
        let flags = Flags { config: Some(path), ..Flags::default() };
        assert!(matches!(RunConfig::resolve(&flags, "train"), Err(Error::Config(_))));
    }
}
