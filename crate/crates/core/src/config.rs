//! `key = value` run configuration covering graph, model and training settings.
//!
//! ```text
//! # comments and blank lines are ignored
//! epochs = 50
//! model.d_model = 32
//! confidence_target = literal
//! ```
//!
//! Keys may be bare (`lr`) or qualified by section (`train.lr`); every bare
//! key is unique across sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 3] = ["graph", "model", "train"];

impl RunConfig {
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Sets one setting from its textual value, keeping the field's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let sections = tree.as_object_mut().expect("struct serializes to an object");
        let (section, field) = match key.split_once('.') {
            Some((s, f)) if SECTIONS.contains(&s) => (s.to_string(), f),
            Some(_) => return Err(Error::invalid(format!("unknown setting `{key}`"))),
            None => {
                let owner = SECTIONS
                    .iter()
                    .find(|s| sections[**s].as_object().is_some_and(|m| m.contains_key(key)))
                    .ok_or_else(|| Error::invalid(format!("unknown setting `{key}`")))?;
                (owner.to_string(), key)
            }
        };
        let fields: &mut Map<String, Value> = sections
            .get_mut(&section)
            .and_then(Value::as_object_mut)
            .expect("section is an object");
        let slot = fields
            .get_mut(field)
            .ok_or_else(|| Error::invalid(format!("unknown setting `{key}`")))?;
        *slot = match slot {
            Value::Bool(_) => Value::Bool(
                value
                    .parse()
                    .map_err(|_| Error::invalid(format!("`{key}` expects true or false, got `{value}`")))?,
            ),
            Value::Number(_) => {
                serde_json::from_str::<serde_json::Number>(value)
                    .map(Value::Number)
                    .map_err(|_| Error::invalid(format!("`{key}` expects a number, got `{value}`")))?
            }
            _ => Value::String(value.to_string()),
        };
        let updated: RunConfig = serde_json::from_value(tree)
            .map_err(|e| Error::invalid(format!("bad value `{value}` for `{key}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.graph.top_k == 0 || !(0.0..=1.0).contains(&self.graph.alpha) {
            return Err(Error::invalid("graph config: top_k must be positive and alpha in [0, 1]"));
        }
        Ok(())
    }

    /// Fully resolved settings in `section.key = value` form, one per line.
    pub fn to_kv_string(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for section in SECTIONS {
            for (k, v) in tree[section].as_object().expect("section is an object") {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{section}.{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ConfidenceTarget;

    #[test]
    fn bare_and_qualified_keys() {
        let cfg = RunConfig::from_kv_str(
            "# run\nepochs = 12\nmodel.d_model = 32\nper_head_bias = true\nconfidence_target = literal\n\nlr=0.001\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.model.d_model, 32);
        assert!(cfg.model.per_head_bias);
        assert_eq!(cfg.train.confidence_target, ConfidenceTarget::Literal);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.graph, GraphConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_kv_str("epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::from_kv_str("epochs = many").is_err());
        assert!(RunConfig::from_kv_str("epochs = -4").is_err());
        assert!(RunConfig::from_kv_str("just words").is_err());
        assert!(RunConfig::from_kv_str("gap_mode = diagonal").is_err());
    }

    #[test]
    fn resolved_dump_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.set("alpha", "0.25").unwrap();
        cfg.set("gap_mode", "pairwise").unwrap();
        let back = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }
}
