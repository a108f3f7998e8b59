//! Run configuration, read from TOML with dotted-key overrides.
//!
//! ```toml
//! input_size = [352, 352]
//! epochs = 60
//! learning_rate = 1e-4
//! batch_size = 1
//! seed = 0
//!
//! [switches]
//! ctc = true
//! fsp = true
//!
//! [model.encoder]
//! widths = [32, 64, 128, 160]
//!
//! [data]
//! root = "data"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, INPUT_MULTIPLE};
use crate::data::{load_dataset_from, ClipSegment, Split, DEFAULT_SEGMENT_LEN};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::parallel::Execution;

/// Module on/off switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub ctc: bool,
    pub fsp: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self { ctc: true, fsp: true }
    }
}

impl Switches {
    /// The four ablation configurations, in table order.
    pub const ABLATION: [(&'static str, Switches); 4] = [
        ("backbone", Switches { ctc: false, fsp: false }),
        ("backbone+ctc", Switches { ctc: true, fsp: false }),
        ("backbone+fsp", Switches { ctc: false, fsp: true }),
        ("full", Switches { ctc: true, fsp: true }),
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Channel groups in the spatial perception blocks.
    pub fsp_groups: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fsp_groups: 4,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        for s in crate::backbone::EXPORTED_SCALES {
            let c = self.encoder.scale_width(s);
            if self.fsp_groups == 0 || !c.is_multiple_of(self.fsp_groups) {
                return Err(Error::Config(format!(
                    "fsp_groups {} must divide the scale-{s} width {c}",
                    self.fsp_groups
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `manifest.txt` and one directory per video.
    pub root: PathBuf,
    /// Video list; `<root>/manifest.txt` when unset.
    pub manifest: Option<PathBuf>,
    pub segment_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            manifest: None,
            segment_len: DEFAULT_SEGMENT_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `[height, width]` the frames are resized to.
    pub input_size: [usize; 2],
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub switches: Switches,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_size: [352, 352],
            epochs: 60,
            learning_rate: 1e-4,
            batch_size: 1,
            seed: 0,
            switches: Switches::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.data.segment_len == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets a dotted key such as `model.encoder.widths` to a TOML value
    /// (`[8, 16, 32, 32]`, `true`, `1e-3`); anything that does not parse as
    /// TOML is taken as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let updated = self.with_key(key, value)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    fn with_key(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).expect("config serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key} = {value}: {e}")))
    }

    /// Applies `key=value` overrides in order and validates the result.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut cfg = self.clone();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg = cfg.with_key(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Segments of one split (all videos when `split` is `None`).
    pub fn load_split(&self, split: Option<Split>, exec: Execution) -> Result<Vec<ClipSegment>> {
        load_dataset_from(
            &self.data.root,
            self.data.manifest.as_deref(),
            split,
            self.data.segment_len,
            exec,
        )
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.input_size[0], self.input_size[1])
    }

    /// A narrow model suited to CPU experiments on small frames.
    pub fn small(input: usize) -> Self {
        let mut cfg = Self {
            input_size: [input, input],
            ..Self::default()
        };
        cfg.model.encoder.widths = [8, 16, 32, 32];
        cfg.model.encoder.heads = [1, 1, 2, 2];
        cfg.model.encoder.mlp_ratio = 2;
        cfg.model.decoder.width = 16;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.input_size, [352, 352]);
        assert_eq!(cfg.epochs, 60);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::from_toml("epochs = 3\n[switches]\nctc = false\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.switches.ctc && cfg.switches.fsp);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "input_size = [350, 352]",
            "epochs = 0",
            "learning_rate = -1.0",
            "colour = 3",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "model.encoder.widths=[8, 16, 32, 32]",
            "model.encoder.heads=[1,1,2,2]",
            "switches.fsp=false",
            "learning_rate=1e-3",
            "data.root=/tmp/x",
        ])
        .unwrap();
        assert_eq!(cfg.model.encoder.widths, [8, 16, 32, 32]);
        assert!(!cfg.switches.fsp);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x"));
        assert!(cfg.set("model.nope", "1").is_err());
        cfg.set("data.manifest", "\"/tmp/m.txt\"").unwrap();
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("/tmp/m.txt")));
        assert!(cfg.set("epochs", "0").is_err());
        assert_eq!(cfg.epochs, 60);
    }

    #[test]
    fn small_preset_is_valid() {
        RunConfig::small(128).validate().unwrap();
    }
}
