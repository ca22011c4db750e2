use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SyntheticSpec;
use crate::analysis::{EvalProtocol, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::model::{PretrainConfig, SamplerConfig, VarConfig};
use crate::personalize::FinetuneConfig;
use crate::tokenizer::{AutoencoderConfig, AutoencoderTrainConfig};

/// One pipeline stage. The leading `stage` key selects the variant; every
/// other key belongs to that variant and unknown keys are rejected. Nested
/// `seed` keys of training and sampling sections are replaced by the
/// stage `seed`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum RunConfig {
    PretrainTokenizer(TokenizerStage),
    PretrainVar(VarStage),
    Finetune(FinetuneStage),
    Sample(SampleStage),
    AnalyzeWeights(WeightsStage),
    AnalyzeScales(ScalesStage),
    Evaluate(EvaluateStage),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub training: AutoencoderTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub tokenizer: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub model: VarConfig,
    #[serde(default)]
    pub training: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub tokenizer: PathBuf,
    pub model: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub tokenizer: PathBuf,
    pub model: PathBuf,
    pub prompt: String,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsStage {
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub orig: PathBuf,
    pub tuned: PathBuf,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub tokenizer: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    /// Corpus images averaged, taken evenly across the generic split.
    #[serde(default = "twenty")]
    pub images: usize,
}

fn twenty() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateStage {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may instead come from the command line.
    #[serde(default)]
    pub out: PathBuf,
    pub tokenizer: PathBuf,
    pub model: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub protocol: EvalProtocol,
    #[serde(default = "subject_name")]
    pub subject: String,
}

fn subject_name() -> String {
    "subject".into()
}

const STAGES: &[&str] = &[
    "pretrain-tokenizer",
    "pretrain-var",
    "finetune",
    "sample",
    "analyze-weights",
    "analyze-scales",
    "evaluate",
];

// Reads `stage` first and then streams the remaining keys into the
// variant, so parse errors keep their line and column.
impl<'de> Deserialize<'de> for RunConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = RunConfig;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an object whose first key is `stage`")
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RunConfig, A::Error> {
                use serde::de::{value::MapAccessDeserializer, Error as _};
                let key: Option<String> = map.next_key()?;
                if key.as_deref() != Some("stage") {
                    return Err(A::Error::custom("the first key must be `stage`"));
                }
                let stage: String = map.next_value()?;
                let rest = MapAccessDeserializer::new(map);
                Ok(match stage.as_str() {
                    "pretrain-tokenizer" => {
                        RunConfig::PretrainTokenizer(Deserialize::deserialize(rest)?)
                    }
                    "pretrain-var" => RunConfig::PretrainVar(Deserialize::deserialize(rest)?),
                    "finetune" => RunConfig::Finetune(Deserialize::deserialize(rest)?),
                    "sample" => RunConfig::Sample(Deserialize::deserialize(rest)?),
                    "analyze-weights" => RunConfig::AnalyzeWeights(Deserialize::deserialize(rest)?),
                    "analyze-scales" => RunConfig::AnalyzeScales(Deserialize::deserialize(rest)?),
                    "evaluate" => RunConfig::Evaluate(Deserialize::deserialize(rest)?),
                    other => return Err(A::Error::unknown_variant(other, STAGES)),
                })
            }
        }
        d.deserialize_map(V)
    }
}

impl RunConfig {
    /// Parses JSON; errors carry serde's line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::PretrainTokenizer(_) => "pretrain-tokenizer",
            RunConfig::PretrainVar(_) => "pretrain-var",
            RunConfig::Finetune(_) => "finetune",
            RunConfig::Sample(_) => "sample",
            RunConfig::AnalyzeWeights(_) => "analyze-weights",
            RunConfig::AnalyzeScales(_) => "analyze-scales",
            RunConfig::Evaluate(_) => "evaluate",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            RunConfig::PretrainTokenizer(s) => &s.out,
            RunConfig::PretrainVar(s) => &s.out,
            RunConfig::Finetune(s) => &s.out,
            RunConfig::Sample(s) => &s.out,
            RunConfig::AnalyzeWeights(s) => &s.out,
            RunConfig::AnalyzeScales(s) => &s.out,
            RunConfig::Evaluate(s) => &s.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            RunConfig::PretrainTokenizer(s) => s.out = out,
            RunConfig::PretrainVar(s) => s.out = out,
            RunConfig::Finetune(s) => s.out = out,
            RunConfig::Sample(s) => s.out = out,
            RunConfig::AnalyzeWeights(s) => s.out = out,
            RunConfig::AnalyzeScales(s) => s.out = out,
            RunConfig::Evaluate(s) => s.out = out,
        }
    }

    /// No-op for `analyze-weights`, which is deterministic without one.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            RunConfig::PretrainTokenizer(s) => s.seed = seed,
            RunConfig::PretrainVar(s) => s.seed = seed,
            RunConfig::Finetune(s) => s.seed = seed,
            RunConfig::Sample(s) => s.seed = seed,
            RunConfig::AnalyzeWeights(_) => {}
            RunConfig::AnalyzeScales(s) => s.seed = seed,
            RunConfig::Evaluate(s) => s.seed = seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_json(
            "{\n  \"stage\": \"sample\",\n  \"out\": \"o\",\n  \"tokenizer\": \"t\",\n  \"model\": \"m\",\n  \"prompt\": \"a circle\",\n  \"bogus\": 1\n}",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 7"), "{msg}");
        assert!(RunConfig::from_json("{\"stage\": \"nope\", \"out\": \"o\"}").is_err());
    }

    #[test]
    fn minimal_configs_fill_documented_defaults() {
        let c =
            RunConfig::from_json("{\"stage\": \"pretrain-tokenizer\", \"out\": \"o\"}").unwrap();
        match c {
            RunConfig::PretrainTokenizer(s) => {
                assert_eq!(s.training, AutoencoderTrainConfig::default());
                assert_eq!(s.dataset, SyntheticSpec::default());
            }
            _ => panic!("wrong stage"),
        }
    }
}
