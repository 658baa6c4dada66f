//! Run configuration: a JSON file with a `train` section and a data
//! reference, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dismax_core::train::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::artifacts::DataRef;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<DataRef>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 50 epochs, decay at 25 and 40.
    Desk,
    /// 300 epochs, decay at 150, 200 and 250.
    Full,
}

/// Flag overrides for [`TrainConfig`]; `None` keeps the file or preset value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named schedule instead of the desk defaults
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays
    #[arg(long, value_delimiter = ',')]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub entropic_scale: Option<f64>,
    /// Weight of the fractional probability term
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated hidden widths; the last is the feature dimension
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl TrainOverrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        match self.preset {
            Some(Preset::Full) => {
                let full = TrainConfig::full_schedule();
                t.epochs = full.epochs;
                t.lr_decay_epochs = full.lr_decay_epochs;
            }
            Some(Preset::Desk) => {
                let desk = TrainConfig::default();
                t.epochs = desk.epochs;
                t.lr_decay_epochs = desk.lr_decay_epochs;
            }
            None => {}
        }
        macro_rules! apply {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    t.$f = v.clone();
                }
            )*};
        }
        apply!(
            loss,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            lr_decay_epochs,
            lr_decay_factor,
            entropic_scale,
            alpha,
            seed,
            hidden_dims,
            num_classes,
            val_fraction
        );
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"train": {"loss": "dismax-fpr", "epochs": 7, "seed": 3}, "data": {"images": "a.idx"}}"#,
        )
        .unwrap();
        let o = TrainOverrides {
            config: Some(path),
            seed: Some(9),
            ..Default::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.loss, LossKind::DismaxFpr);
        assert_eq!((cfg.train.epochs, cfg.train.seed), (7, 9));
        assert_eq!(cfg.data.unwrap().images, PathBuf::from("a.idx"));
    }

    #[test]
    fn presets() {
        let o = TrainOverrides {
            preset: Some(Preset::Full),
            ..Default::default()
        };
        let t = o.resolve().unwrap().train;
        assert_eq!((t.epochs, t.lr_decay_epochs), (300, vec![150, 200, 250]));
        let o = TrainOverrides {
            preset: Some(Preset::Full),
            epochs: Some(2),
            ..Default::default()
        };
        assert_eq!(o.resolve().unwrap().train.epochs, 2);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"epochz": 7}}"#).unwrap();
        let o = TrainOverrides {
            config: Some(path),
            ..Default::default()
        };
        assert!(o.resolve().is_err());
    }
}
