use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub ir_out_channels: usize,
    pub ir_stride: usize,
    pub errc_channels: usize,
    pub cbam_reduction: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub num_classes: usize,
}

/// What fills the second slot of each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlockMode {
    #[default]
    Errc,
    /// Ablation: a stride-1 inverted residual block replaces ERRC.
    InvertedResidualOnly,
}

impl FromStr for BlockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "errc" => Ok(BlockMode::Errc),
            "ir" | "inverted_residual_only" => Ok(BlockMode::InvertedResidualOnly),
            other => Err(Error::config(format!("unknown block mode {other:?} (errc|ir)"))),
        }
    }
}

impl fmt::Display for BlockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockMode::Errc => "errc",
            BlockMode::InvertedResidualOnly => "ir",
        })
    }
}

/// Declarative architecture: two Conv-BN-ReLU stems, three attention stages
/// and a two-layer dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem: [StemConfig; 2],
    pub stages: [StageConfig; 3],
    pub head: HeadConfig,
    pub block_mode: BlockMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |c, r| StageConfig {
            ir_out_channels: c,
            ir_stride: 2,
            errc_channels: c,
            cbam_reduction: r,
        };
        Self {
            input_size: 224,
            stem: [
                StemConfig { out_channels: 32, kernel: 3, stride: 2 },
                StemConfig { out_channels: 48, kernel: 3, stride: 2 },
            ],
            stages: [stage(64, 16), stage(96, 16), stage(128, 16)],
            head: HeadConfig {
                hidden_units: 256,
                dropout1: 0.2,
                dropout2: 0.2,
                num_classes: 2,
            },
            block_mode: BlockMode::Errc,
            seed: 0,
        }
    }
}

fn conv_extent(n: usize, k: usize, s: usize) -> Option<usize> {
    let padded = n + 2 * (k / 2);
    (padded >= k).then(|| (padded - k) / s + 1)
}

impl ModelConfig {
    /// 8×8 input with a handful of channels, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            stem: [
                StemConfig { out_channels: 4, kernel: 3, stride: 2 },
                StemConfig { out_channels: 4, kernel: 3, stride: 1 },
            ],
            stages: [
                StageConfig { ir_out_channels: 8, ir_stride: 2, errc_channels: 8, cbam_reduction: 4 },
                StageConfig { ir_out_channels: 8, ir_stride: 1, errc_channels: 8, cbam_reduction: 4 },
                StageConfig { ir_out_channels: 8, ir_stride: 1, errc_channels: 8, cbam_reduction: 4 },
            ],
            head: HeadConfig {
                hidden_units: 6,
                dropout1: 0.2,
                dropout2: 0.2,
                num_classes: 2,
            },
            block_mode: BlockMode::Errc,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("input_size must be positive"));
        }
        for (i, s) in self.stem.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::config(format!("stem{} has a zero entry", i + 1)));
            }
        }
        for (i, st) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            if st.errc_channels == 0 || st.errc_channels % 4 != 0 {
                return Err(Error::config(format!("{name}: ERRC channels must be a positive multiple of 4")));
            }
            if st.errc_channels != st.ir_out_channels {
                return Err(Error::config(format!("{name}: ERRC channels must equal inverted residual output channels")));
            }
            if st.cbam_reduction == 0 || st.errc_channels % st.cbam_reduction != 0 {
                return Err(Error::config(format!("{name}: channels not divisible by CBAM reduction")));
            }
            if !(1..=2).contains(&st.ir_stride) {
                return Err(Error::config(format!("{name}: stride must be 1 or 2")));
            }
        }
        if self.head.num_classes != 2 {
            return Err(Error::config("num_classes must be 2"));
        }
        if self.head.hidden_units == 0 {
            return Err(Error::config("head hidden units must be positive"));
        }
        for r in [self.head.dropout1, self.head.dropout2] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        self.feature_size()?;
        Ok(())
    }

    /// Spatial extent of the final feature map.
    pub fn feature_size(&self) -> Result<usize> {
        let mut n = self.input_size;
        for s in &self.stem {
            n = conv_extent(n, s.kernel, s.stride).ok_or_else(|| Error::config("input too small for stem"))?;
        }
        for st in &self.stages {
            n = conv_extent(n, 3, st.ir_stride).ok_or_else(|| Error::config("input too small for stages"))?;
        }
        Ok(n)
    }

    pub fn flatten_dim(&self) -> Result<usize> {
        let f = self.feature_size()?;
        Ok(f * f * self.stages[2].errc_channels)
    }

    /// Serialises as `key=value` lines (also the config-file vocabulary).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("input_size".to_string(), self.input_size.to_string())];
        for (i, s) in self.stem.iter().enumerate() {
            kv.push((format!("stem{}", i + 1), format!("{},{},{}", s.out_channels, s.kernel, s.stride)));
        }
        for (i, st) in self.stages.iter().enumerate() {
            kv.push((
                format!("stage{}", i + 1),
                format!("{},{},{},{}", st.ir_out_channels, st.ir_stride, st.errc_channels, st.cbam_reduction),
            ));
        }
        kv.push(("head_hidden".into(), self.head.hidden_units.to_string()));
        kv.push(("dropout1".into(), self.head.dropout1.to_string()));
        kv.push(("dropout2".into(), self.head.dropout2.to_string()));
        kv.push(("num_classes".into(), self.head.num_classes.to_string()));
        kv.push(("blocks".into(), self.block_mode.to_string()));
        kv.push(("model_seed".into(), self.seed.to_string()));
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` pair. Returns `Ok(false)` for keys that do
    /// not belong to the model configuration.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_size" => self.input_size = parse(key, value)?,
            "stem1" | "stem2" => {
                let v = parse_list(key, value, 3)?;
                let i = if key == "stem1" { 0 } else { 1 };
                self.stem[i] = StemConfig { out_channels: v[0], kernel: v[1], stride: v[2] };
            }
            "stage1" | "stage2" | "stage3" => {
                let v = parse_list(key, value, 4)?;
                let i = key[5..].parse::<usize>().expect("matched") - 1;
                self.stages[i] = StageConfig {
                    ir_out_channels: v[0],
                    ir_stride: v[1],
                    errc_channels: v[2],
                    cbam_reduction: v[3],
                };
            }
            "head_hidden" => self.head.hidden_units = parse(key, value)?,
            "dropout1" => self.head.dropout1 = parse(key, value)?,
            "dropout2" => self.head.dropout2 = parse(key, value)?,
            "num_classes" => self.head.num_classes = parse(key, value)?,
            "blocks" => self.block_mode = value.parse()?,
            "model_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
            if !cfg.apply(k.trim(), v.trim())? {
                return Err(Error::config(format!("line {}: unknown model key {:?}", i + 1, k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str, n: usize) -> Result<Vec<usize>> {
    let v: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::config(format!("{key} needs {n} comma-separated integers")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_with_seven_by_seven_features() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_size().unwrap(), 7);
        assert_eq!(cfg.flatten_dim().unwrap(), 128 * 49);
        assert_eq!(ModelConfig::tiny().feature_size().unwrap(), 2);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.block_mode = BlockMode::InvertedResidualOnly;
        cfg.seed = 99;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let mut cfg = ModelConfig::default();
        cfg.stages[0].errc_channels = 66;
        cfg.stages[0].ir_out_channels = 66;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.stages[1].errc_channels = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.stages[2].cbam_reduction = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.head.num_classes = 3;
        assert!(cfg.validate().is_err());
    }
}
