//! Run configuration: every tunable of a command in one flat text file.
//!
//! One assignment per line, `section.key = value`. Nested fields use further
//! dots (`synth.gray.adhesive = 45`). Values are JSON (`0.5`, `[1, 2, 4]`,
//! `"text"`, `null`); a bare word is read as a string and `a/b` as a
//! fraction. `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wearseg::acquisition::PressKinematics;
use wearseg::augment::AugmentSpec;
use wearseg::dataio::Fit;
use wearseg::synth::{SequenceSpec, SyntheticSpec};
use wearseg::training::{BayesOptSpec, GridSpec, TrainConfig};
use wearseg::unet::UNetConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    /// Seeds weight initialisation.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    None,
    Pad,
    Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// How frames whose extents are not a multiple of the network stride are
    /// brought to size.
    pub fit: FitMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 40,
            n_validation: 12,
            n_test: 12,
            fit: FitMode::None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathsSection {
    /// Dataset directory written by `synth` or `augment`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Class palette file; the built-in palette is used when unset.
    pub palette: Option<PathBuf>,
    /// Sequence directory written by `synth --sequence`.
    pub sequence: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSection {
    pub frames: usize,
    pub stroke_step: u64,
    pub wear_time_constant: f64,
    pub cleanings: Vec<u64>,
    pub residual_after_cleaning: f64,
    pub batch_size: usize,
}

impl Default for SeriesSection {
    fn default() -> Self {
        SeriesSection {
            frames: 200,
            stroke_step: 50,
            wear_time_constant: 2000.0,
            cleanings: vec![3525, 7025],
            residual_after_cleaning: 0.1,
            batch_size: 8,
        }
    }
}

impl SeriesSection {
    pub fn sequence(&self) -> SequenceSpec {
        SequenceSpec {
            residual_after_cleaning: self.residual_after_cleaning,
            ..SequenceSpec::evenly_spaced(
                self.frames,
                self.stroke_step,
                self.wear_time_constant,
                self.cleanings.clone(),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    /// Target exposure displacements in micrometres.
    pub targets_um: Vec<f64>,
    /// Field of view across the image width, metres.
    pub fov_width: f64,
    pub image_width: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection {
            targets_um: vec![0.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            fov_width: 12e-3,
            image_width: 1920,
        }
    }
}

/// Resolved configuration of one invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub synth: SyntheticSpec,
    pub data: DataSection,
    pub paths: PathsSection,
    pub grid: GridSpec,
    pub bayes: BayesOptSpec,
    pub series: SeriesSection,
    pub press: PressKinematics,
    pub timing: TimingSection,
    /// Keys assigned by a file or flag, for callers that fall back to other
    /// sources (a checkpoint's architecture) when a section was left alone.
    #[serde(skip)]
    explicit: BTreeSet<String>,
}

/// Where an assignment came from, for error messages.
#[derive(Debug, Clone)]
pub enum Origin<'a> {
    File(&'a Path, usize),
    Flag(usize),
}

impl fmt::Display for Origin<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File(path, line) => write!(f, "{}:{line}", path.display()),
            Origin::Flag(n) => write!(f, "--set #{n}"),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Some((a, b)) = raw.split_once('/') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            if let Some(n) = serde_json::Number::from_f64(a / b) {
                return Value::Number(n);
            }
        }
    }
    Value::String(raw.to_string())
}

fn strip_comment(line: &str) -> &str {
    // A `#` inside a quoted string is part of the value.
    let mut quoted = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingPath {
            path: path.to_path_buf(),
            what: format!("config file ({e})"),
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> CliResult<()> {
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::File(path, i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                at: origin.to_string(),
                msg: "expected `section.key = value`".into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Syntax {
                    at: origin.to_string(),
                    msg: format!("`{key}` is assigned twice"),
                });
            }
            self.set(key, value.trim(), &origin)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> CliResult<()> {
        for (i, item) in overrides.iter().enumerate() {
            let origin = Origin::Flag(i + 1);
            let (key, value) = item.split_once('=').ok_or_else(|| CliError::Syntax {
                at: origin.to_string(),
                msg: format!("expected `section.key=value`, got `{item}`"),
            })?;
            self.set(key.trim(), value.trim(), &origin)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str, origin: &Origin) -> CliResult<()> {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Syntax {
                at: origin.to_string(),
                msg: format!("`{key}` is not of the form `section.key`"),
            });
        }
        let mut tree = serde_json::to_value(&*self).expect("configuration serialises");
        let mut slot = &mut tree;
        for (depth, part) in parts.iter().enumerate() {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(*part))
                .ok_or_else(|| CliError::UnknownKey {
                    at: origin.to_string(),
                    key: parts[..=depth].join("."),
                })?;
        }
        *slot = parse_value(raw);
        let explicit = std::mem::take(&mut self.explicit);
        *self = serde_json::from_value(tree).map_err(|e| CliError::Syntax {
            at: origin.to_string(),
            msg: format!("bad value `{raw}` for `{key}`: {e}"),
        })?;
        self.explicit = explicit;
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Overrides every seed of the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.train.seed = seed;
        self.augment.seed = seed;
        self.synth.seed = seed;
        self.bayes.seed = seed;
        self.explicit.insert("run.seed".into());
    }

    pub fn section_is_explicit(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.explicit.iter().any(|k| k.starts_with(&prefix))
    }

    /// The configured fit for a network whose extents must be multiples of `m`.
    pub fn fit(&self, m: usize) -> Fit {
        match self.data.fit {
            FitMode::None => Fit::None,
            FitMode::Pad => Fit::Pad(m),
            FitMode::Crop => Fit::Crop(m),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.unet.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.synth.validate()?;
        self.grid.validate()?;
        self.bayes.validate()?;
        self.press.validate()?;
        self.series.sequence().validate()?;
        let m = self.unet.size_multiple();
        if self.data.fit == FitMode::None && (self.synth.width % m != 0 || self.synth.height % m != 0) {
            return Err(CliError::Contradiction(format!(
                "synth extent {} x {} is not a multiple of {m} and data.fit = none",
                self.synth.width, self.synth.height
            )));
        }
        Ok(())
    }

    /// Every leaf as a `section.key = value` line, sorted by key. Feeding the
    /// text back through [`RunConfig::apply_text`] reproduces the
    /// configuration.
    pub fn to_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            match v {
                Value::Object(m) if !prefix.is_empty() && m.is_empty() => {
                    out.push(format!("{prefix} = {{}}"));
                }
                Value::Object(m) if prefix.split('.').count() < 2 || is_struct(m) => {
                    for (k, child) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                _ => out.push(format!("{prefix} = {v}")),
            }
        }
        // Enum payloads such as `{"Sgd": {"momentum": 0.9}}` stay whole.
        fn is_struct(m: &serde_json::Map<String, Value>) -> bool {
            !(m.len() == 1 && m.keys().all(|k| k.starts_with(|c: char| c.is_ascii_uppercase())))
        }
        let mut lines = Vec::new();
        walk("", &serde_json::to_value(self).expect("configuration serialises"), &mut lines);
        lines.sort();
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
