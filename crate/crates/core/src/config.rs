//! Run configuration: a flat JSON object with dotted keys, e.g.
//!
//! ```json
//! { "method": "jcf-shared", "codebook.n": 8, "optimizer.lr": 1e-5 }
//! ```
//!
//! The same dotted keys are accepted as command-line overrides. Unknown
//! keys are rejected, and the canonical serialized form (sorted keys) is
//! embedded in checkpoints so an evaluation run can reconstruct its
//! training configuration exactly.

use crate::cost::{CostMethod, PoolingConfig};
use crate::dataset::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::model::{FreezeFlags, Method, ModelSpec};
use serde_json::Value;
use std::collections::BTreeMap;

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub seed: u64,
    // pooling
    pub d: usize,
    pub out_dim: usize,
    pub normalize_output: bool,
    // codebook
    pub n_words: usize,
    pub rank: usize,
    pub temperature: f64,
    pub hard_assign: bool,
    pub dual_codebook: bool,
    pub lloyd_iters: usize,
    // dataset
    pub n_instances: usize,
    pub samples_per_instance: usize,
    pub raw_dim: usize,
    pub locations: usize,
    pub cluster_spread: f64,
    pub noise_scale: f64,
    // optimizer
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub margin: f64,
    // freeze flags
    pub freeze_codebook: bool,
    pub freeze_reduction: bool,
    pub freeze_recombination: bool,
    // evaluation
    pub eval_ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: "jcf-shared".into(),
            seed: 0,
            d: 64,
            out_dim: 64,
            normalize_output: true,
            n_words: 8,
            rank: 8,
            temperature: 0.1,
            hard_assign: false,
            dual_codebook: false,
            lloyd_iters: 10,
            n_instances: 64,
            samples_per_instance: 4,
            raw_dim: 128,
            locations: 16,
            cluster_spread: 1.0,
            noise_scale: 0.4,
            lr: 1e-5,
            batch_size: 64,
            steps: 200,
            margin: 0.1,
            freeze_codebook: false,
            freeze_reduction: false,
            freeze_recombination: false,
            eval_ks: vec![1, 2, 4, 8],
        }
    }
}

impl RunConfig {
    /// Parses a flat JSON config file, starting from defaults. Unknown keys
    /// are errors.
    pub fn from_flat_json(json: &str) -> Result<RunConfig> {
        let value: Value =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("config: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Format("config must be a JSON object".into()));
        };
        let mut cfg = RunConfig::default();
        for (key, val) in &map {
            cfg.set_key(key, val)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override; the value is parsed as JSON when
    /// possible, otherwise taken as a bare string.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let val = serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.to_string()));
        self.set_key(key, &val)
    }

    fn set_key(&mut self, key: &str, val: &Value) -> Result<()> {
        fn as_u(key: &str, v: &Value) -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Format(format!("`{key}` expects a non-negative integer")))
        }
        fn as_f(key: &str, v: &Value) -> Result<f64> {
            v.as_f64()
                .ok_or_else(|| Error::Format(format!("`{key}` expects a number")))
        }
        fn as_b(key: &str, v: &Value) -> Result<bool> {
            v.as_bool()
                .ok_or_else(|| Error::Format(format!("`{key}` expects a boolean")))
        }
        fn as_s(key: &str, v: &Value) -> Result<String> {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("`{key}` expects a string")))
        }
        match key {
            "method" => self.method = as_s(key, val)?,
            "seed" => {
                self.seed = val
                    .as_u64()
                    .ok_or_else(|| Error::Format("`seed` expects a non-negative integer".into()))?
            }
            "pooling.d" => self.d = as_u(key, val)?,
            "pooling.out_dim" => self.out_dim = as_u(key, val)?,
            "pooling.normalize_output" => self.normalize_output = as_b(key, val)?,
            "codebook.n" => self.n_words = as_u(key, val)?,
            "codebook.r" => self.rank = as_u(key, val)?,
            "codebook.temperature" => self.temperature = as_f(key, val)?,
            "codebook.mode" => match as_s(key, val)?.as_str() {
                "soft" => self.hard_assign = false,
                "hard" => self.hard_assign = true,
                other => {
                    return Err(Error::Format(format!(
                        "`codebook.mode` must be `soft` or `hard`, got `{other}`"
                    )))
                }
            },
            "codebook.dual" => self.dual_codebook = as_b(key, val)?,
            "codebook.lloyd_iters" => self.lloyd_iters = as_u(key, val)?,
            "dataset.n_instances" => self.n_instances = as_u(key, val)?,
            "dataset.samples_per_instance" => self.samples_per_instance = as_u(key, val)?,
            "dataset.raw_dim" => self.raw_dim = as_u(key, val)?,
            "dataset.locations" => self.locations = as_u(key, val)?,
            "dataset.cluster_spread" => self.cluster_spread = as_f(key, val)?,
            "dataset.noise_scale" => self.noise_scale = as_f(key, val)?,
            "optimizer.lr" => self.lr = as_f(key, val)?,
            "optimizer.batch_size" => self.batch_size = as_u(key, val)?,
            "optimizer.steps" => self.steps = as_u(key, val)?,
            "optimizer.margin" => self.margin = as_f(key, val)?,
            "freeze.codebook" => self.freeze_codebook = as_b(key, val)?,
            "freeze.reduction" => self.freeze_reduction = as_b(key, val)?,
            "freeze.recombination" => self.freeze_recombination = as_b(key, val)?,
            "eval.ks" => {
                let arr = val
                    .as_array()
                    .ok_or_else(|| Error::Format("`eval.ks` expects an array".into()))?;
                let mut ks = Vec::new();
                for v in arr {
                    ks.push(as_u(key, v)?);
                }
                if ks.is_empty() {
                    return Err(Error::Format("`eval.ks` must be non-empty".into()));
                }
                self.eval_ks = ks;
            }
            other => {
                return Err(Error::Format(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Canonical flat-JSON form: every key, sorted.
    pub fn to_flat_json(&self) -> String {
        let mut map: BTreeMap<&str, Value> = BTreeMap::new();
        map.insert("method", Value::String(self.method.clone()));
        map.insert("seed", self.seed.into());
        map.insert("pooling.d", self.d.into());
        map.insert("pooling.out_dim", self.out_dim.into());
        map.insert("pooling.normalize_output", self.normalize_output.into());
        map.insert("codebook.n", self.n_words.into());
        map.insert("codebook.r", self.rank.into());
        map.insert("codebook.temperature", json_f64(self.temperature));
        map.insert(
            "codebook.mode",
            Value::String(if self.hard_assign { "hard" } else { "soft" }.into()),
        );
        map.insert("codebook.dual", self.dual_codebook.into());
        map.insert("codebook.lloyd_iters", self.lloyd_iters.into());
        map.insert("dataset.n_instances", self.n_instances.into());
        map.insert(
            "dataset.samples_per_instance",
            self.samples_per_instance.into(),
        );
        map.insert("dataset.raw_dim", self.raw_dim.into());
        map.insert("dataset.locations", self.locations.into());
        map.insert("dataset.cluster_spread", json_f64(self.cluster_spread));
        map.insert("dataset.noise_scale", json_f64(self.noise_scale));
        map.insert("optimizer.lr", json_f64(self.lr));
        map.insert("optimizer.batch_size", self.batch_size.into());
        map.insert("optimizer.steps", self.steps.into());
        map.insert("optimizer.margin", json_f64(self.margin));
        map.insert("freeze.codebook", self.freeze_codebook.into());
        map.insert("freeze.reduction", self.freeze_reduction.into());
        map.insert("freeze.recombination", self.freeze_recombination.into());
        map.insert(
            "eval.ks",
            Value::Array(self.eval_ks.iter().map(|&k| k.into()).collect()),
        );
        serde_json::to_string_pretty(&map).expect("config serializes")
    }

    /// The model architecture this configuration describes.
    pub fn parse_method(&self) -> Result<Method> {
        match self.method.as_str() {
            "baseline" => Ok(Method::Baseline),
            "factorized" => Ok(Method::Factorized),
            "jcf" => Ok(Method::Jcf { n: self.n_words }),
            "jcf-shared" | "jcf_shared" => Ok(Method::JcfShared {
                n: self.n_words,
                r: self.rank,
            }),
            other => Err(Error::input(
                "config",
                format!("method `{other}` is not trainable (expected baseline, factorized, jcf, or jcf-shared)"),
            )),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            method: self.parse_method()?,
            d_in: self.raw_dim,
            d: self.d,
            out_dim: self.out_dim,
            temperature: self.temperature,
            hard_assign: self.hard_assign,
            normalize_output: self.normalize_output,
            dual_codebook: self.dual_codebook,
            lloyd_iters: self.lloyd_iters,
            freeze: FreezeFlags {
                codebook: self.freeze_codebook,
                reduction: self.freeze_reduction,
                recombination: self.freeze_recombination,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_instances: self.n_instances,
            samples_per_instance: self.samples_per_instance,
            raw_dim: self.raw_dim,
            locations: self.locations,
            cluster_spread: self.cluster_spread,
            noise_scale: self.noise_scale,
            seed: self.seed,
        }
    }

    /// The cost-model configuration for this run's architecture.
    pub fn cost_config(&self) -> Result<PoolingConfig> {
        let method = match self.parse_method()? {
            Method::Baseline => CostMethod::Baseline,
            Method::Factorized => CostMethod::Factorized,
            Method::Jcf { .. } => CostMethod::Jcf,
            Method::JcfShared { .. } => CostMethod::JcfShared,
        };
        let cfg = PoolingConfig {
            method,
            d_in: self.raw_dim,
            d: self.d,
            out_dim: self.out_dim,
            n: self.parse_method()?.n_words(),
            r: self.parse_method()?.rank(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whole-run validation: architecture, dataset, and optimizer coherence.
    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.dataset_spec().validate()?;
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(Error::input("config", "batch size must be even and at least 4"));
        }
        if self.batch_size / 2 > self.n_instances {
            return Err(Error::input(
                "config",
                format!(
                    "batch of {} needs {} instances, dataset has {}",
                    self.batch_size,
                    self.batch_size / 2,
                    self.n_instances
                ),
            ));
        }
        if self.samples_per_instance < 4 {
            return Err(Error::input(
                "config",
                "training needs at least 4 samples per instance (2 land in the train split)",
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::input("config", "margin must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::input("config", "learning rate must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::input("config", "step budget must be positive"));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::input("config", "eval.ks must be non-empty"));
        }
        Ok(())
    }
}

fn json_f64(v: f64) -> Value {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .expect("finite config value")
}
