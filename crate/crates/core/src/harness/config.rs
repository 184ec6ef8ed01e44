//! Model and run configuration, with the plain-text `key = value` format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::PolicyKind;
use crate::distributions::ActionSpace;
use crate::error::{Error, Result};
use crate::losses::PgNorm;
use crate::rewards::RewardMode;

/// Which policy-gradient attention variant drives the fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgMode {
    /// No attention policy; features are fused unweighted.
    Off,
    DiscreteOnly,
    ContinuousOnly,
    Compound,
}

impl PgMode {
    pub fn policy_kind(self) -> Option<PolicyKind> {
        match self {
            Self::Off => None,
            Self::DiscreteOnly => Some(PolicyKind::DiscreteOnly),
            Self::ContinuousOnly => Some(PolicyKind::ContinuousOnly),
            Self::Compound => Some(PolicyKind::Compound),
        }
    }
}

/// Every hyperparameter and ablation switch of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub gcn_layers: usize,
    /// Share one embedding map between both sides of the region affinity.
    #[serde(default)]
    pub tied_affinity: bool,
    pub actions: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub beta: f64,
    pub margin: f64,
    pub heads: usize,
    pub reward: RewardMode,
    pub pg: PgMode,
    pub pg_norm: PgNorm,
    pub triplet: bool,
    pub instance: bool,
    pub decode: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            hidden: 64,
            embed: 64,
            gcn_layers: 1,
            tied_affinity: false,
            actions: 100,
            temperature: 1.0,
            lambda: 20.0,
            beta: 0.5,
            margin: 0.2,
            heads: 1,
            reward: RewardMode::R1Ap,
            pg: PgMode::Compound,
            pg_norm: PgNorm::Mean,
            triplet: true,
            instance: true,
            decode: true,
            batch_size: 16,
            epochs: 50,
            lr: 4e-4,
            lr_drop_epoch: 15,
            lr_drop_factor: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.word_dim == 0 || self.hidden == 0 || self.embed == 0 {
            return fail("word_dim, hidden and embed must be positive".into());
        }
        if !(1..=2).contains(&self.heads) {
            return fail(format!("heads must be 1 or 2, got {}", self.heads));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("margin", self.margin),
            ("lr", self.lr),
            ("lr_drop_factor", self.lr_drop_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        ActionSpace::new(self.actions, self.temperature).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.triplet || self.instance || self.decode) && self.pg == PgMode::Off {
            return fail("every loss term is disabled".into());
        }
        Ok(())
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        ActionSpace::new(self.actions, self.temperature)
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self)? else {
            unreachable!("config serializes to an object");
        };
        let Some(old) = map.get(key) else {
            return Err(Error::Config(format!(
                "unknown config key `{key}`; valid keys: {}",
                Self::keys().join(", ")
            )));
        };
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let new = match old {
            Value::Bool(_) => Value::Bool(match value {
                "true" | "on" | "yes" | "1" => true,
                "false" | "off" | "no" | "0" => false,
                _ => return Err(bad()),
            }),
            Value::Number(_) => {
                serde_json::from_str::<serde_json::Number>(value).map(Value::Number).map_err(|_| bad())?
            }
            _ => Value::String(value.to_string()),
        };
        map.insert(key.to_string(), new);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("`{key} = {value}`: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    no + 1
                )));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// `key = value` rendering that round-trips through [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object");
        };
        render(&map)
    }
}

fn render(map: &Map<String, Value>) -> String {
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k} = {s}\n"),
            other => format!("{k} = {other}\n"),
        })
        .collect()
}
