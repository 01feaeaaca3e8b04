//! Flat run configuration. Every key can come from a JSON file and be
//! overridden by a `--key value` flag of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use synmoe_core::data::DataConfig;
use synmoe_core::gradsuite::SuiteOptions;
use synmoe_core::model::ModelConfig;
use synmoe_core::moe::PlacementMode;
use synmoe_core::synergy::LossWeights;
use synmoe_core::tape::OpKind;
use synmoe_core::train::{StageConfig, StageName};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Experts,
    Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// root seed; every random stream is derived from it by label
    pub seed: u64,
    /// output directory
    pub out: PathBuf,

    pub layers: usize,
    pub d_vis: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub vocab: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub placement: PlacementMode,
    pub renormalize: bool,
    pub synergy_tokens: usize,
    pub d_align_temporal: usize,
    pub d_align_spatial: usize,

    pub alpha: f64,
    pub upcycle_noise: f64,

    pub stages: Vec<StageName>,
    pub steps: usize,
    pub batch_size: usize,
    /// multiplies every stage's default learning rate
    pub lr_scale: f64,
    pub log_every: usize,
    pub phase_a_fraction: f64,

    pub samples: usize,
    pub classes: usize,
    pub visual_tokens: usize,
    pub caption_len: usize,
    pub copy_len: usize,
    /// share of CSQA samples in the stage_2_2 instruction mix
    pub mix_ratio: f64,
    pub geo: bool,
    /// CSQA JSONL file consumed by stage_2_2
    pub csqa: Option<PathBuf>,
    /// directory with `temporal.txt` and `spatial.txt`; mock teachers otherwise
    pub teacher_dir: Option<PathBuf>,

    pub grad_seeds: usize,
    pub grad_eps: f64,
    pub e2e_coords: usize,
    /// op whose backward rule is deliberately corrupted
    pub corrupt_backward: Option<String>,

    /// run directory or routing.csv for route-stats
    pub run: Option<PathBuf>,
    /// number of final logged steps aggregated by route-stats
    pub window: usize,

    pub axis: AblationAxis,

    /// camera frame JSON for lift
    pub frame: Option<PathBuf>,

    /// directory of scene-graph pair JSON files for gen-csqa
    pub pairs: Option<PathBuf>,
    /// seeded synthetic pairs added to the gen-csqa corpus
    pub synthetic_pairs: usize,
    pub pair_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DataConfig::default();
        let s = StageConfig::defaults(StageName::Stage1_1);
        let g = SuiteOptions::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            layers: m.layers,
            d_vis: m.d_vis,
            d_model: m.d_model,
            d_hidden: m.d_hidden,
            vocab: m.vocab,
            heads: m.heads,
            experts: m.experts,
            top_k: m.top_k,
            placement: m.placement,
            renormalize: m.renormalize,
            synergy_tokens: m.synergy_tokens,
            d_align_temporal: m.d_align_temporal,
            d_align_spatial: m.d_align_spatial,
            alpha: LossWeights::default().alpha,
            upcycle_noise: 0.01,
            stages: StageName::ALL.to_vec(),
            steps: s.steps,
            batch_size: s.batch_size,
            lr_scale: 1.0,
            log_every: s.log_every,
            phase_a_fraction: s.phase_a_fraction,
            samples: d.samples,
            classes: d.classes,
            visual_tokens: d.visual_tokens,
            caption_len: d.caption_len,
            copy_len: d.copy_len,
            mix_ratio: d.mix_ratio,
            geo: d.geo,
            csqa: None,
            teacher_dir: None,
            grad_seeds: g.seeds,
            grad_eps: g.eps,
            e2e_coords: g.e2e_coords,
            corrupt_backward: None,
            run: None,
            window: 1,
            axis: AblationAxis::Experts,
            frame: None,
            pairs: None,
            synthetic_pairs: 0,
            pair_cap: synmoe_core::csqa::DEFAULT_PAIR_CAP,
        }
    }
}

/// Every config key, in declaration order.
pub fn keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Reads a flag value as JSON when it parses, as a plain string otherwise.
/// Lists may also be written comma-separated.
fn flag_value(key: &str, raw: &str, default: &Value) -> Value {
    if let Value::Array(_) = default {
        if !raw.trim_start().starts_with('[') {
            return Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| Value::String(s.to_string()))
                    .collect(),
            );
        }
    }
    if let Value::String(_) = default {
        return Value::String(raw.to_string());
    }
    if key == "csqa" || key == "teacher_dir" || key == "run" || key == "frame" || key == "pairs" {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the optional config file, then flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let defaults = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        let mut merged: Map<String, Value> = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| {
                HarnessError::Config(format!(
                    "{}: line {} column {}: {e}",
                    path.display(),
                    e.line(),
                    e.column()
                ))
            })?;
            let Value::Object(doc) = doc else {
                return Err(HarnessError::Config(format!(
                    "{}: config must be a JSON object",
                    path.display()
                )));
            };
            for (k, v) in doc {
                if !defaults.contains_key(&k) {
                    return Err(HarnessError::Config(format!(
                        "{}: unknown config key {k:?}",
                        path.display()
                    )));
                }
                merged.insert(k, v);
            }
        }
        for (k, raw) in overrides {
            let key = k.replace('-', "_");
            let default = defaults
                .get(&key)
                .ok_or_else(|| HarnessError::Config(format!("unknown flag --{k}")))?;
            merged.insert(key.clone(), flag_value(&key, raw, default));
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_vis: self.d_vis,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            vocab: self.vocab,
            heads: self.heads,
            layers: self.layers,
            experts: self.experts,
            top_k: self.top_k,
            placement: self.placement,
            synergy_tokens: self.synergy_tokens,
            d_align_temporal: self.d_align_temporal,
            d_align_spatial: self.d_align_spatial,
            renormalize: self.renormalize,
            ..ModelConfig::default()
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            samples: self.samples,
            classes: self.classes,
            visual_tokens: self.visual_tokens,
            caption_len: self.caption_len,
            copy_len: self.copy_len,
            mix_ratio: self.mix_ratio,
            geo: self.geo,
            ..DataConfig::default()
        }
    }

    pub fn stage_config(&self, name: StageName) -> StageConfig {
        let mut s = StageConfig::defaults(name);
        s.lr *= self.lr_scale;
        s.steps = self.steps;
        s.batch_size = self.batch_size;
        s.alpha = self.alpha;
        s.log_every = self.log_every;
        s.phase_a_fraction = self.phase_a_fraction;
        s
    }

    pub fn suite_options(&self) -> SuiteOptions {
        SuiteOptions {
            seeds: self.grad_seeds,
            base_seed: self.seed,
            eps: self.grad_eps,
            e2e_coords: self.e2e_coords,
            fault: self.corrupt_backward.clone(),
        }
    }

    /// Checks every module's preconditions; nothing runs before this passes.
    pub fn validate(&self) -> Result<()> {
        let mc = self.model_config();
        mc.validate()?;
        self.data_config().validate(&mc)?;
        LossWeights::new(self.alpha)?;
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(HarnessError::Config(format!(
                "lr_scale must be > 0, got {}",
                self.lr_scale
            )));
        }
        if !(self.upcycle_noise >= 0.0 && self.upcycle_noise.is_finite()) {
            return Err(HarnessError::Config(format!(
                "upcycle_noise must be >= 0, got {}",
                self.upcycle_noise
            )));
        }
        for w in self.stages.windows(2) {
            if w[0] >= w[1] {
                return Err(HarnessError::Config(format!(
                    "stages must be listed once each in pipeline order, got {} before {}",
                    w[0], w[1]
                )));
            }
        }
        for &s in &self.stages {
            self.stage_config(s).validate()?;
        }
        self.suite_options().validate()?;
        if let Some(op) = &self.corrupt_backward {
            OpKind::parse(op)?;
        }
        if self.window == 0 {
            return Err(HarnessError::Config("window must be >= 1".into()));
        }
        if self.pair_cap == 0 {
            return Err(HarnessError::Config("pair_cap must be >= 1".into()));
        }
        Ok(())
    }
}
