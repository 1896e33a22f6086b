//! Declarative run configuration: a TOML document mirrored by command-line
//! flags, with flags taking precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `spn-memm`, `spn-crf`, or `spn-ho-crf`.
    pub kind: String,
    pub layers: usize,
    pub children: usize,
    pub states: usize,
    /// `sum` or `max`.
    pub semiring: String,
    /// MEMM order M (M-1 previous labels).
    pub order: usize,
    pub beam_width: usize,
    /// Observation window width for the MEMM and first-order chain.
    pub window: usize,
    /// Higher-order input-dependent factors as (m, n) pairs.
    pub factors: Vec<(usize, usize)>,
    /// Input-independent transition n-gram orders.
    pub ngram_orders: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: "spn-crf".to_string(),
            layers: 1,
            children: 2,
            states: 2,
            semiring: "sum".to_string(),
            order: 1,
            beam_width: 20,
            window: 1,
            factors: vec![(1, 1)],
            ngram_orders: vec![2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-2,
            l2: 1e-4,
            epochs: 100,
            seed: 0,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `jsonl`, `ocr`, or `synth`.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub ocr_path: Option<PathBuf>,
    #[serde(default)]
    pub test_fold: Option<usize>,
    #[serde(default)]
    pub dev_fold: Option<usize>,
    /// Synthetic task: seed, sequences, length, labels, feature dim.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Held-out sequences taken from the tail of a synthetic set.
    #[serde(default)]
    pub synth_dev: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: None,
            train: None,
            dev: None,
            test: None,
            ocr_path: None,
            test_fold: None,
            dev_fold: None,
            synth: None,
            synth_dev: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub sequences: usize,
    pub len: usize,
    pub labels: usize,
    pub dim: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.model.kind.as_str() {
            "spn-memm" | "spn-crf" | "spn-ho-crf" => {}
            other => return Err(CliError::config(format!("unknown model kind {other:?}"))),
        }
        match self.model.semiring.as_str() {
            "sum" | "max" => {}
            other => return Err(CliError::config(format!("unknown semiring {other:?}"))),
        }
        if self.model.layers == 0
            || self.model.children == 0
            || self.model.states == 0
            || self.model.order == 0
            || self.model.beam_width == 0
            || self.model.window == 0
        {
            return Err(CliError::config(
                "layers, children, states, order, beam_width and window must be >= 1",
            ));
        }
        if self.model.kind == "spn-ho-crf" && self.model.factors.is_empty() {
            return Err(CliError::config(
                "spn-ho-crf requires at least one (m, n) factor",
            ));
        }
        if self.train.lr <= 0.0 || self.train.l2 < 0.0 {
            return Err(CliError::config("lr must be > 0 and l2 >= 0"));
        }
        if self.train.epochs == 0 {
            return Err(CliError::config("epochs must be >= 1"));
        }
        if self.train.eval_every == 0 {
            return Err(CliError::config("eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// Parse `"m:n,m:n"` into factor pairs.
pub fn parse_factors(spec: &str) -> Result<Vec<(usize, usize)>, CliError> {
    spec.split(',')
        .map(|pair| {
            let mut it = pair.split(':');
            let m = it.next().and_then(|v| v.trim().parse().ok());
            let n = it.next().and_then(|v| v.trim().parse().ok());
            match (m, n, it.next()) {
                (Some(m), Some(n), None) => Ok((m, n)),
                _ => Err(CliError::config(format!(
                    "bad factor {pair:?}; expected m:n"
                ))),
            }
        })
        .collect()
}

/// Parse `"1,2,3"` into a list of orders.
pub fn parse_orders(spec: &str) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad n-gram order {v:?}")))
        })
        .collect()
}

/// Parse `"seed,sequences,len,labels,dim"`.
pub fn parse_synth(spec: &str) -> Result<SynthSpec, CliError> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(CliError::config(
            "synth spec must be seed,sequences,len,labels,dim",
        ));
    }
    let nums: Vec<u64> = parts
        .iter()
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::config(format!("bad synth value {v:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(SynthSpec {
        seed: nums[0],
        sequences: nums[1] as usize,
        len: nums[2] as usize,
        labels: nums[3] as usize,
        dim: nums[4] as usize,
    })
}
