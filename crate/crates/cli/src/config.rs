//! Run configuration, read from TOML or JSON. Every section and field is
//! optional; missing values take the defaults below.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use vade_core::attribution::GenerationConfig;
use vade_core::codec::{CodecConfig, CodecTrainConfig};
use vade_core::diffusion::{ModelConfig, TrainConfig};
use vade_core::eval::EvalConfig;
use vade_core::phantom::{default_class_mix, PhantomClass, PhantomSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub spec: PhantomSpec,
    pub train_mix: BTreeMap<PhantomClass, usize>,
    /// Test-split count for every class, held-out ones included.
    pub test_per_class: usize,
    /// Dataset seed offset for the test split.
    pub test_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: PhantomSpec::default(),
            train_mix: default_class_mix(),
            test_per_class: 50,
            test_seed_offset: 1000,
        }
    }
}

impl DataConfig {
    pub fn test_mix(&self) -> BTreeMap<PhantomClass, usize> {
        PhantomClass::ALL
            .iter()
            .map(|&c| (c, self.test_per_class))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSection {
    pub config: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub strengths: Vec<f64>,
    pub guidances: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            strengths: vec![0.55, 0.85],
            guidances: vec![4.0, 7.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Requests admitted at once (running plus waiting); more get 503.
    pub queue_limit: usize,
    /// Generations executing concurrently.
    pub workers: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            queue_limit: 8,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub codec: CodecSection,
    pub generation: GenerationConfig,
    #[serde(deserialize_with = "induce_section")]
    pub induce: GenerationConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub serve: ServeConfig,
}

const INDUCE_PROMPT: &str = "large lung opacity on the left";

/// Like the other generation sections, but a missing prompt falls back to the
/// induce default.
fn induce_section<'de, D: Deserializer<'de>>(d: D) -> Result<GenerationConfig, D::Error> {
    #[derive(Deserialize)]
    struct Section {
        prompt: Option<String>,
        #[serde(flatten)]
        rest: GenerationConfig,
    }
    let Section { prompt, rest } = Section::deserialize(d)?;
    Ok(GenerationConfig {
        prompt: prompt.unwrap_or_else(|| INDUCE_PROMPT.into()),
        ..rest
    })
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            codec: CodecSection::default(),
            generation: GenerationConfig::default(),
            induce: GenerationConfig {
                prompt: INDUCE_PROMPT.into(),
                ..GenerationConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl AppConfig {
    /// `.toml` files are parsed as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "toml"))
    }

    pub fn parse(text: &str, toml_format: bool) -> Result<Self, CliError> {
        if toml_format {
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
        } else {
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
        }
    }

    /// Applies a global seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.codec.train.seed = seed;
        self.generation.seed = seed;
        self.induce.seed = seed;
        self.eval.generation.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = AppConfig::parse(
            "seed = 3\n[train]\nlr = 0.001\n[sweep]\nstrengths = [0.5]\n",
            true,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.sweep.strengths, vec![0.5]);
        assert_eq!(c.sweep.guidances, SweepConfig::default().guidances);
        let c = AppConfig::parse("[induce]\nstrength = 0.5\n", true).unwrap();
        assert_eq!(c.induce.prompt, INDUCE_PROMPT);
        assert_eq!(c.induce.strength, 0.5);
    }

    #[test]
    fn json_round_trip() {
        let c = AppConfig::default();
        let back = AppConfig::parse(&serde_json::to_string(&c).unwrap(), false).unwrap();
        assert_eq!(back, c);
        assert!(AppConfig::parse("seed = \"x\"", true).is_err());
    }

    #[test]
    fn readme_example_is_the_default() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let len = readme[start..].find("```").unwrap();
        let c = AppConfig::parse(&readme[start..start + len], true).unwrap();
        assert_eq!(c, AppConfig::default());
    }
}
