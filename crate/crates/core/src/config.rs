//! One TOML file for every tunable, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderTrainConfig, MaskedTrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::features::{ClassifierConfig, FeatureTrainConfig};
use crate::generator::{AdversarialTrainConfig, GeneratorConfig, ReferenceTrainConfig};
use crate::guided::{SimilarityTrainConfig, ORACLE_TEMPERATURE};
use crate::latent::ProbeConfig;
use crate::latent_opt::OptimConfig;
use crate::pipeline::LAYER_THRESHOLD;
use crate::text_align::AlignmentConfig;
use crate::toyfaces::DatasetConfig;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "WSPACE_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root for datasets, checkpoints, sessions and run manifests.
    pub workdir: PathBuf,
    pub dataset: DatasetConfig,
    pub generator: GeneratorSection,
    pub encoders: EncodersSection,
    pub text: AlignmentConfig,
    pub guided: GuidedSection,
    pub optim: OptimConfig,
    pub serve: ServeSection,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            workdir: PathBuf::from("work"),
            dataset: DatasetConfig::default(),
            generator: GeneratorSection::default(),
            encoders: EncodersSection::default(),
            text: AlignmentConfig::default(),
            guided: GuidedSection::default(),
            optim: OptimConfig::default(),
            serve: ServeSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub model: GeneratorConfig,
    pub reference: ReferenceTrainConfig,
    pub adversarial: AdversarialTrainConfig,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersSection {
    pub inversion: EncoderTrainConfig,
    pub modality: EncoderTrainConfig,
    pub masked: MaskedTrainConfig,
    pub features: FeatureTrainConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedSection {
    /// `"oracle"` or `"learned:<checkpoint>"`.
    pub similarity: String,
    pub oracle_temperature: f64,
    pub layer_threshold: f64,
    pub train: SimilarityTrainConfig,
}

impl Default for GuidedSection {
    fn default() -> Self {
        GuidedSection {
            similarity: "oracle".into(),
            oracle_temperature: ORACLE_TEMPERATURE,
            layer_threshold: LAYER_THRESHOLD,
            train: SimilarityTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    /// Upper bound on optimizer iterations a request may ask for.
    pub max_iterations: usize,
    /// Most results returned by one generation request.
    pub max_images: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { addr: "127.0.0.1:8080".into(), max_iterations: 200, max_images: 32 }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Apply `section.key=value` overrides; values are TOML literals, with
    /// bare words taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[(S, S)]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let (key, raw) = (key.as_ref(), raw.as_ref());
            let parts: Vec<&str> = key.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("malformed override key {key:?}")));
            }
            let mut node = &mut root;
            for p in &parts[..parts.len() - 1] {
                node = node
                    .as_table_mut()
                    .and_then(|t| t.get_mut(*p))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("{key:?} is not inside a section")))?;
            let last = parts[parts.len() - 1];
            if !table.contains_key(last) && !matches!(last, "target_error" | "target_accuracy" | "target_retrieval" | "p") {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(last.to_string(), parse_scalar(raw));
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail validation
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.generator.model.validate()?;
        if !(self.guided.oracle_temperature > 0.0) {
            return Err(Error::Config("guided.oracle_temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.guided.layer_threshold) {
            return Err(Error::Config("guided.layer_threshold must lie in [0, 1]".into()));
        }
        if self.serve.max_iterations == 0 || self.serve.max_iterations > 200 {
            return Err(Error::Config("serve.max_iterations must lie in 1..=200".into()));
        }
        Ok(())
    }

    /// `path`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn pipeline(&self) -> crate::pipeline::PipelineConfig {
        crate::pipeline::PipelineConfig { layer_threshold: self.guided.layer_threshold, optim: self.optim.clone() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.workdir.join("dataset")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.workdir.join("checkpoints")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.workdir.join("sessions")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.workdir.join("runs")
    }
}
