//! Flat `section.key = value` configuration with `desk` and `paper` size
//! presets and `TCS2_*` environment overrides.
//!
//! Files are TOML restricted to dotted keys, e.g.
//!
//! ```text
//! preset = "desk"
//! codec.tau_c = 0.07
//! flow.cfg_scale = 3.0
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "TCS2_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_singers: usize,
    pub n_scores: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub min_duration: u32,
    pub max_duration: u32,
    /// Relative weights of the four synthetic languages.
    pub language_mix: Vec<f64>,
    pub rest_prob: f64,
    pub technique_prob: f64,
    pub shared_content_fraction: f64,
    pub speech_jitter: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_singers: 20,
            n_scores: 200,
            min_units: 4,
            max_units: 8,
            min_duration: 2,
            max_duration: 5,
            language_mix: vec![0.25; 4],
            rest_prob: 0.1,
            technique_prob: 0.6,
            shared_content_fraction: 0.2,
            speech_jitter: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BbcConfig {
    pub mask_m: usize,
    pub mask_seed: u64,
}

impl Default for BbcConfig {
    fn default() -> Self {
        Self { mask_m: 8, mask_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub latent_channels: usize,
    pub tau_c: f64,
    pub learn_tau: bool,
    pub disc_channels: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub w_contras: f64,
    pub w_recon: f64,
    pub w_adv: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            kernel: 5,
            latent_channels: 8,
            tau_c: 0.07,
            learn_tau: true,
            disc_channels: 32,
            text_layers: 2,
            text_heads: 4,
            w_contras: 1.0,
            w_recon: 1.0,
            w_adv: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub train_timesteps: usize,
    pub infer_steps: usize,
    pub cfg_scale: f64,
    pub rope_on_prompt: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d_model: 64,
            n_heads: 4,
            train_timesteps: 1000,
            infer_steps: 25,
            cfg_scale: 3.0,
            rope_on_prompt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub alpha: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_fraction: f64,
    pub expansion: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 2,
            alpha: 0.1,
            tau_start: 2.0,
            tau_end: 0.3,
            anneal_fraction: 0.8,
            expansion: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub codec_lr: f64,
    pub svs_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub codec_steps: usize,
    pub svs_steps: usize,
    pub codec_batch: usize,
    pub svs_batch: usize,
    pub prompt_dropout_p: f64,
    pub heldout: usize,
    pub grad_clip: f64,
    pub log_every: usize,
    pub w_dur: f64,
    pub w_pitch: f64,
    pub w_balance: f64,
    pub w_flow: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codec_lr: 2e-3,
            svs_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 50,
            codec_steps: 5000,
            svs_steps: 6000,
            codec_batch: 16,
            svs_batch: 8,
            prompt_dropout_p: 0.2,
            heldout: 20,
            grad_clip: 1.0,
            log_every: 50,
            w_dur: 1.0,
            w_pitch: 1.0,
            w_balance: 1.0,
            w_flow: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub bbc: BbcConfig,
    pub codec: CodecConfig,
    pub flow: FlowConfig,
    pub moe: MoeConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Config::default();
        if preset == Preset::Paper {
            c.codec.hidden = 384;
            c.codec.latent_channels = 20;
            c.flow.n_blocks = 4;
            c.flow.d_model = 768;
            c.flow.n_heads = 8;
            c.moe.n_experts = 4;
            c.train.codec_lr = 1e-4;
            c.train.svs_lr = 5e-5;
            c.train.warmup_steps = 10_000;
            c.train.svs_steps = 100_000;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config {
            key: key.into(),
            message: message.into(),
        });
        if self.codec.layers != 3 {
            return bad("codec.layers", "the 8x stride schedule needs exactly 3 layers");
        }
        if self.codec.kernel % 2 == 0 || self.codec.kernel < 3 {
            return bad("codec.kernel", "kernel must be odd and at least 3");
        }
        if self.flow.n_heads == 0 || self.flow.d_model % (2 * self.flow.n_heads) != 0 {
            return bad("flow.d_model", "d_model must be divisible by 2 * n_heads");
        }
        if self.codec.text_heads == 0 || self.flow.d_model % self.codec.text_heads != 0 {
            return bad("codec.text_heads", "d_model must be divisible by text_heads");
        }
        if self.moe.n_experts == 0 {
            return bad("moe.n_experts", "need at least one expert");
        }
        if !(self.moe.tau_end > 0.0 && self.moe.tau_start >= self.moe.tau_end) {
            return bad("moe.tau_end", "need tau_start >= tau_end > 0");
        }
        if !(0.0..=1.0).contains(&self.moe.anneal_fraction) {
            return bad("moe.anneal_fraction", "must lie in [0, 1]");
        }
        if self.flow.infer_steps == 0 {
            return bad("flow.infer_steps", "need at least one step");
        }
        if self.flow.train_timesteps < 2 {
            return bad("flow.train_timesteps", "need at least two grid points");
        }
        if self.corpus.language_mix.len() != crate::score::N_LANGUAGES
            || self.corpus.language_mix.iter().any(|w| *w < 0.0)
            || self.corpus.language_mix.iter().sum::<f64>() <= 0.0
        {
            return bad("corpus.language_mix", "need 4 non-negative weights with positive sum");
        }
        if !(0.0..=1.0).contains(&self.train.prompt_dropout_p) {
            return bad("train.prompt_dropout_p", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Every key this configuration understands, in `section.key` form.
    pub fn keys() -> Vec<String> {
        flatten(&to_table(&Config::default())).into_keys().collect()
    }

    /// Parses a config document. Returns the config and the set of keys that
    /// were set explicitly.
    pub fn from_str_with_keys(text: &str) -> Result<(Config, BTreeSet<String>)> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<document>".into(),
            message: e.message().to_string(),
        })?;
        let mut flat = flatten(&table);
        let preset = match flat.remove("preset") {
            None => Preset::Desk,
            Some(toml::Value::String(s)) if s == "desk" => Preset::Desk,
            Some(toml::Value::String(s)) if s == "paper" => Preset::Paper,
            Some(other) => {
                return Err(Error::Config {
                    key: "preset".into(),
                    message: format!("unknown preset {other}"),
                })
            }
        };
        let present = flat.keys().cloned().collect();
        let config = Config::preset(preset).with_overrides(flat)?;
        Ok((config, present))
    }

    pub fn load(path: &Path) -> Result<(Config, BTreeSet<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_with_keys(&text)
    }

    /// Applies `TCS2_SECTION_KEY=value` overrides from the given variables.
    /// Returns the keys that were overridden.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<BTreeSet<String>>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let by_env: BTreeMap<String, String> = Self::keys()
            .into_iter()
            .map(|k| (env_name(&k), k))
            .collect();
        let mut overrides = BTreeMap::new();
        for (name, raw) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            let Some(key) = by_env.get(&name) else { continue };
            let value = parse_scalar(&raw);
            overrides.insert(key.clone(), value);
        }
        let keys = overrides.keys().cloned().collect();
        *self = self.clone().with_overrides(overrides)?;
        Ok(keys)
    }

    fn with_overrides(self, overrides: BTreeMap<String, toml::Value>) -> Result<Config> {
        let mut flat = flatten(&to_table(&self));
        for (key, value) in overrides {
            let Some(slot) = flat.get_mut(&key) else {
                return Err(Error::Config {
                    key,
                    message: "unknown key".into(),
                });
            };
            *slot = coerce(slot, value).ok_or_else(|| Error::Config {
                key: key.clone(),
                message: format!("expected a value of type {}", slot.type_str()),
            })?;
        }
        let config: Config = toml::Value::Table(unflatten(flat))
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config {
                key: "<document>".into(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        flatten(&to_table(self))
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Errors naming the first of `keys` not present in `present`.
    pub fn require(present: &BTreeSet<String>, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !present.contains(**k)) {
            Some(k) => Err(Error::Config {
                key: (*k).into(),
                message: "required key missing".into(),
            }),
            None => Ok(()),
        }
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

fn to_table(config: &Config) -> toml::Table {
    match toml::Value::try_from(config).expect("config serializes") {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    }
}

fn flatten(table: &toml::Table) -> BTreeMap<String, toml::Value> {
    let mut out = BTreeMap::new();
    for (k, v) in table {
        match v {
            toml::Value::Table(inner) => {
                for (ik, iv) in flatten(inner) {
                    out.insert(format!("{k}.{ik}"), iv);
                }
            }
            other => {
                out.insert(k.clone(), other.clone());
            }
        }
    }
    out
}

fn unflatten(flat: BTreeMap<String, toml::Value>) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("section is a table");
        }
        node.insert(leaf.to_string(), value);
    }
    root
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn coerce(default: &toml::Value, value: toml::Value) -> Option<toml::Value> {
    use toml::Value as V;
    match (default, value) {
        (V::Float(_), V::Integer(i)) => Some(V::Float(i as f64)),
        (V::Integer(_), V::Integer(i)) if i >= 0 => Some(V::Integer(i)),
        (V::Float(_), v @ V::Float(_)) => Some(v),
        (V::Boolean(_), v @ V::Boolean(_)) => Some(v),
        (V::String(_), v @ V::String(_)) => Some(v),
        (V::Array(_), V::Array(items)) => Some(V::Array(
            items
                .into_iter()
                .map(|v| match v {
                    V::Integer(i) => V::Float(i as f64),
                    other => other,
                })
                .collect(),
        )),
        _ => None,
    }
}
