//! Flat `key=value` run configuration shared by every subcommand.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use pinsite::loss::{FocalLossConfig, LossKind};
use pinsite::model::ModelConfig;
use pinsite::train::TrainConfig;
use pinsite::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Drives the split, the augmentation draws and the batch order.
    pub seed: u64,
    pub cross_entropy: bool,
    pub focal: FocalLossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            cross_entropy: false,
            focal: FocalLossConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_loss(value: &str) -> Result<LossKind> {
    match value {
        "focal" => Ok(LossKind::Focal(FocalLossConfig::default())),
        "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
        other => Err(Error::Config(format!("unknown loss {other:?}, expected focal or ce"))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.apply(key, value)? {
            return Ok(true);
        }
        let t = &mut self.train;
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "min_delta" => t.min_delta = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "decay_period" => t.decay_period = parse(key, value)?,
            "decay_rate" => t.decay_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "loss" => self.cross_entropy = parse_loss(value)? == LossKind::CrossEntropy,
            "focal_alpha" => self.focal.alpha = parse(key, value)?,
            "focal_gamma" => self.focal.gamma = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let applied = cfg
                .apply(k.trim(), v.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                    other => Error::Config(format!("line {}: {other}", i + 1)),
                })?;
            if !applied {
                return Err(Error::Config(format!("line {}: unknown key {:?}", i + 1, k.trim())));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_text(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    /// Final consistency pass after command-line overrides.
    pub fn finish(mut self) -> Result<Self> {
        self.train.block_mode = self.model.block_mode;
        self.train.seed = self.seed;
        self.train.loss = if self.cross_entropy {
            LossKind::CrossEntropy
        } else {
            LossKind::Focal(self.focal)
        };
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pinsite::model::BlockMode;

    #[test]
    fn defaults_and_overrides() {
        let text = "# run\nmax_epochs = 5\npatience=2\nloss=ce\nblocks=ir\nseed=9\ninput_size=32\n";
        let cfg = RunConfig::from_text(text).unwrap().finish().unwrap();
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.train.loss, LossKind::CrossEntropy);
        assert_eq!(cfg.train.block_mode, BlockMode::InvertedResidualOnly);
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.model.input_size, 32);
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        let cfg = RunConfig::from_text("stem1=8,3,2   # out,kernel,stride\n").unwrap();
        assert_eq!(cfg.model.stem[0].out_channels, 8);
    }

    #[test]
    fn focal_parameters() {
        let cfg = RunConfig::from_text("loss=ce\nfocal_gamma=0\nloss=focal\nfocal_alpha=0.4").unwrap().finish().unwrap();
        assert_eq!(cfg.train.loss, LossKind::Focal(FocalLossConfig { alpha: 0.4, gamma: 0.0 }));
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_text("seed=1\n\nlearning_rate=3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = RunConfig::from_text("seed=x").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(RunConfig::from_text("no equals sign").is_err());
        let bad = RunConfig::from_text("max_epochs=10\npatience=10").unwrap();
        assert!(matches!(bad.finish(), Err(Error::Config(_))));
    }
}
