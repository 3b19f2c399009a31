//! Run configuration: JSON file, dotted-path overrides and ablation presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tfmamba_core::data::SyntheticSpec;
use tfmamba_core::model::ModelConfig;
use tfmamba_core::tf_block::BranchLayout;
use tfmamba_core::trainer::TrainConfig;
use tfmamba_core::Error;

use crate::exit::CliError;

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Mean-pooled input features straight into the classifier.
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "attn")]
    Attn,
    #[serde(rename = "attn+temporal")]
    AttnTemporal,
    #[serde(rename = "attn+temporal+freq")]
    AttnTemporalFreq,
    /// `attn+temporal+freq` trained with the contrastive term.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Full model with the frequency branch replaced by a second temporal one.
    #[serde(rename = "dual_temporal")]
    DualTemporal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Attn,
        Variant::AttnTemporal,
        Variant::AttnTemporalFreq,
        Variant::Full,
        Variant::DualTemporal,
    ];

    /// Overwrites the fields this preset controls. `λ` keeps its configured
    /// value only for the variants that train with the contrastive term.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        let (attention, blocks, layout, contrastive) = match self {
            Variant::Baseline => (false, false, None, false),
            Variant::Attn => (true, false, None, false),
            Variant::AttnTemporal => (true, true, Some(BranchLayout::TemporalOnly), false),
            Variant::AttnTemporalFreq => (true, true, Some(BranchLayout::TemporalFrequency), false),
            Variant::Full => (true, true, Some(BranchLayout::TemporalFrequency), true),
            Variant::DualTemporal => (true, true, Some(BranchLayout::DualTemporal), true),
        };
        model.use_attention = attention;
        model.use_blocks = blocks;
        if let Some(layout) = layout {
            model.block.layout = layout;
        }
        if !contrastive {
            train.lambda = 0.0;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `path,label,fold_hint` CSV with `labels.json` beside it.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsdBenchConfig {
    pub channels: usize,
    pub groups: usize,
    pub state: usize,
    pub chunk: usize,
}

impl Default for SsdBenchConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            groups: 1,
            state: 16,
            chunk: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Sequence lengths for the scan table.
    pub lengths: Vec<usize>,
    /// Sequence lengths for whole-model forward latency; empty skips it.
    pub forward_lengths: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    pub ssd: SsdBenchConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 256, 1024, 2048],
            forward_lengths: vec![64, 256],
            runs: 31,
            warmup: 5,
            ssd: SsdBenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub data: DataConfig,
    pub out: PathBuf,
    pub bench: BenchConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            data: DataConfig::default(),
            out: PathBuf::from("runs"),
            bench: BenchConfig::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

/// Command-line inputs that shape the configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    /// `KEY=VALUE` pairs, applied in order.
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Defaults, then the config file, then `--set`, `--out` and `--seed`,
    /// then the variant preset.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let defaults = serde_json::to_value(RunConfig::default()).map_err(config_err)?;
        let mut merged = defaults.clone();
        if let Some(path) = &o.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            check_keys(&defaults, &file, "")?;
            merge(&mut merged, file);
        }
        for item in &o.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {item:?}")))?;
            set_path(&mut merged, &defaults, key, parse_value(raw))?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(merged)
            .map_err(|e| CliError::config(format!("{}: {}", e.path(), e.inner())))?;
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = o.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        cfg.variant.apply(&mut cfg.model, &mut cfg.train);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate_training(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(CliError::config("folds: cross-validation needs at least 2 folds"));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        let path = self
            .data
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::config("data.manifest: no manifest path given"))?;
        if !path.is_file() {
            return Err(CliError::io(format!("manifest not found: {}", path.display())));
        }
        Ok(path)
    }
}

fn config_err(e: serde_json::Error) -> CliError {
    CliError::config(e.to_string())
}

/// Rejects object keys that the defaults do not have.
fn check_keys(defaults: &Value, given: &Value, prefix: &str) -> Result<(), CliError> {
    if let (Value::Object(d), Value::Object(g)) = (defaults, given) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                Some(dv) => check_keys(dv, v, &path)?,
                None => return Err(CliError::config(format!("{path}: unknown key"))),
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// JSON if it parses, otherwise the raw string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, defaults: &Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::config(format!("{key}: unknown key"));
    let mut node = root;
    let mut shape = defaults;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        shape = shape.get(part).ok_or_else(unknown)?;
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(unknown())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_set(items: &[&str]) -> Result<RunConfig, CliError> {
        RunConfig::resolve(&Overrides {
            set: items.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        })
    }

    #[test]
    fn dotted_overrides() {
        let cfg = with_set(&["train.lr=0.01", "model.block.layout=\"temporal_only\"", "variant=dual_temporal"]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        // The preset owns the layout.
        assert_eq!(cfg.model.block.layout, BranchLayout::DualTemporal);
        assert_eq!(cfg.variant, Variant::DualTemporal);
        let cfg = with_set(&["data.manifest=some/where.csv", "bench.lengths=[8,16]"]).unwrap();
        assert_eq!(cfg.data.manifest.as_deref(), Some(Path::new("some/where.csv")));
        assert_eq!(cfg.bench.lengths, vec![8, 16]);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_config_errors() {
        for bad in ["train.learning_rate=1", "nope=1", "train.lr=fast", "variant=huge", "train.lr"] {
            let err = with_set(&[bad]).unwrap_err();
            assert_eq!(err.code, 2, "{bad}");
        }
        let err = with_set(&["train.lr=fast"]).unwrap_err();
        assert!(err.message.contains("train.lr"), "{}", err.message);
    }

    #[test]
    fn presets_ladder() {
        let mut m = ModelConfig::default();
        let mut t = TrainConfig::default();
        Variant::Baseline.apply(&mut m, &mut t);
        assert!(!m.use_attention && !m.use_blocks && t.lambda == 0.0);
        let mut t = TrainConfig::default();
        Variant::Full.apply(&mut m, &mut t);
        assert!(m.use_attention && m.use_blocks && t.lambda == 0.1);
        assert_eq!(m.block.layout, BranchLayout::TemporalFrequency);
    }

    #[test]
    fn resolved_dump_round_trips() {
        let cfg = with_set(&["variant=attn+temporal", "train.epochs=3"]).unwrap();
        let again: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        for v in Variant::ALL {
            let name = serde_json::to_value(v).unwrap();
            assert_eq!(serde_json::from_value::<Variant>(name).unwrap(), v);
        }
    }
}
