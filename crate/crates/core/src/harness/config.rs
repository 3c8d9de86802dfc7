use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::SyntheticTaskSpec;
use crate::encoders::{EncoderConfig, Variant};
use crate::error::{MmrlError, Result};
use crate::objective::{Ablations, Mixing};
use crate::trainer::TrainConfig;

/// Everything one experiment needs, parsed from a `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    /// `seed` is overwritten per run from `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub task: SyntheticTaskSpec,
    pub ablations: Ablations,
    pub mixing: Mixing,
    pub backbone_seed: u64,
    pub dump_features: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            task: SyntheticTaskSpec::default(),
            ablations: Ablations::default(),
            mixing: Mixing::Probabilities,
            backbone_seed: 0,
            dump_features: false,
        }
    }
}

/// Keys accepted by [`parse_config`].
pub const KEYS: &[&str] = &[
    "variant",
    "L",
    "heads",
    "d_v",
    "d_t",
    "d",
    "d_r",
    "K",
    "J",
    "r1",
    "r2",
    "alpha",
    "lambda",
    "beta",
    "tau",
    "lr",
    "weight_decay",
    "steps",
    "batch",
    "seeds",
    "classes",
    "shots",
    "separation",
    "ablation",
    "M",
    "patch_dim",
    "N",
    "vocab",
    "test_shots",
    "template_len",
    "task_seed",
    "backbone_seed",
    "residual_bias",
    "rep_positional",
    "mixing",
    "dump_features",
];

fn value<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| MmrlError::Parse {
        line,
        message: format!("invalid value `{raw}` for `{key}`"),
    })
}

fn boolean(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(MmrlError::Parse {
            line,
            message: format!("invalid boolean `{raw}` for `{key}`"),
        }),
    }
}

/// Parses the flat config format; unspecified keys keep the desk defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, raw)) = content.split_once('=') else {
            return Err(MmrlError::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            });
        };
        let (key, raw) = (key.trim(), raw.trim());
        let e = &mut c.encoder;
        match key {
            "variant" => e.variant = Variant::parse(raw)?,
            "L" => e.layers = value(line, key, raw)?,
            "heads" => e.heads = value(line, key, raw)?,
            "d_v" => e.d_v = value(line, key, raw)?,
            "d_t" => e.d_t = value(line, key, raw)?,
            "d" => e.d = value(line, key, raw)?,
            "d_r" => e.d_r = value(line, key, raw)?,
            "K" => e.k = value(line, key, raw)?,
            "J" => e.insert_from = value(line, key, raw)?,
            "r1" => e.r1 = value(line, key, raw)?,
            "r2" => e.r2 = value(line, key, raw)?,
            "beta" => e.beta = value(line, key, raw)?,
            "M" => e.patches = value(line, key, raw)?,
            "patch_dim" => e.patch_dim = value(line, key, raw)?,
            "N" => e.text_len = value(line, key, raw)?,
            "vocab" => e.vocab = value(line, key, raw)?,
            "residual_bias" => e.residual_bias = boolean(line, key, raw)?,
            "rep_positional" => e.rep_positional = boolean(line, key, raw)?,
            "alpha" => c.train.weights.alpha = value(line, key, raw)?,
            "lambda" => c.train.weights.lambda = value(line, key, raw)?,
            "tau" => c.train.weights.tau = value(line, key, raw)?,
            "lr" => c.train.lr = value(line, key, raw)?,
            "weight_decay" => c.train.weight_decay = value(line, key, raw)?,
            "steps" => c.train.steps = value(line, key, raw)?,
            "batch" => c.train.batch = value(line, key, raw)?,
            "seeds" => {
                c.seeds = raw
                    .split(',')
                    .map(|s| value(line, key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "classes" => c.task.classes = value(line, key, raw)?,
            "shots" => c.task.shots = value(line, key, raw)?,
            "test_shots" => c.task.test_shots = value(line, key, raw)?,
            "separation" => c.task.separation = value(line, key, raw)?,
            "template_len" => c.task.template_len = value(line, key, raw)?,
            "task_seed" => c.task.seed = value(line, key, raw)?,
            "backbone_seed" => c.backbone_seed = value(line, key, raw)?,
            "ablation" => c.ablations = Ablations::parse(raw)?,
            "mixing" => {
                c.mixing = match raw.to_ascii_lowercase().as_str() {
                    "probabilities" | "probability" => Mixing::Probabilities,
                    "logits" => Mixing::Logits,
                    _ => {
                        return Err(MmrlError::Parse {
                            line,
                            message: format!("mixing must be `probabilities` or `logits`, found `{raw}`"),
                        })
                    }
                }
            }
            "dump_features" => c.dump_features = boolean(line, key, raw)?,
            other => return Err(MmrlError::UnknownKey(other.to_string())),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(MmrlError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Renders the config back into the file format.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let ablation = self.ablations.active_names();
        let lines = [
            format!("variant = {}", e.variant.name()),
            format!("L = {}", e.layers),
            format!("heads = {}", e.heads),
            format!("d_v = {}", e.d_v),
            format!("d_t = {}", e.d_t),
            format!("d = {}", e.d),
            format!("d_r = {}", e.d_r),
            format!("K = {}", e.k),
            format!("J = {}", e.insert_from),
            format!("r1 = {}", e.r1),
            format!("r2 = {}", e.r2),
            format!("beta = {}", e.beta),
            format!("M = {}", e.patches),
            format!("patch_dim = {}", e.patch_dim),
            format!("N = {}", e.text_len),
            format!("vocab = {}", e.vocab),
            format!("residual_bias = {}", e.residual_bias),
            format!("rep_positional = {}", e.rep_positional),
            format!("alpha = {}", t.weights.alpha),
            format!("lambda = {}", t.weights.lambda),
            format!("tau = {}", t.weights.tau),
            format!("lr = {}", t.lr),
            format!("weight_decay = {}", t.weight_decay),
            format!("steps = {}", t.steps),
            format!("batch = {}", t.batch),
            format!("seeds = {}", seeds.join(",")),
            format!("classes = {}", self.task.classes),
            format!("shots = {}", self.task.shots),
            format!("test_shots = {}", self.task.test_shots),
            format!("separation = {}", self.task.separation),
            format!("template_len = {}", self.task.template_len),
            format!("task_seed = {}", self.task.seed),
            format!("backbone_seed = {}", self.backbone_seed),
            format!(
                "ablation = {}",
                if ablation.is_empty() {
                    "none".into()
                } else {
                    ablation.join(",")
                }
            ),
            format!(
                "mixing = {}",
                match self.mixing {
                    Mixing::Probabilities => "probabilities",
                    Mixing::Logits => "logits",
                }
            ),
            format!("dump_features = {}", self.dump_features),
        ];
        lines.join("\n") + "\n"
    }
}
