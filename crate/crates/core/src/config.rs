//! Flat dotted-key configuration layered over typed defaults.
//!
//! Any serde struct can be configured: its JSON form is flattened to keys such
//! as `train.lr`, a TOML-style file or `key=value` overrides replace leaves, and
//! the result is deserialised back. Unknown keys are rejected with the full
//! list of valid ones.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{config_err, Result};

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn parse_scalar(raw: &str, like: &Value) -> Option<Value> {
    let raw = raw.trim();
    let unquoted = raw.trim_matches('"');
    match like {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_f64() => raw.parse::<f64>().ok().map(|f| serde_json::json!(f)),
        Value::Number(_) => raw
            .parse::<u64>()
            .map(Value::from)
            .or_else(|_| raw.parse::<i64>().map(Value::from))
            .ok()
            .or_else(|| raw.parse::<f64>().ok().filter(|f| f.fract() == 0.0).map(|f| Value::from(f as i64))),
        Value::String(_) => Some(Value::String(unquoted.to_string())),
        Value::Null => {
            if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
                Some(Value::Null)
            } else if let Ok(i) = raw.parse::<i64>() {
                Some(Value::from(i))
            } else if let Ok(f) = raw.parse::<f64>() {
                Some(serde_json::json!(f))
            } else {
                Some(Value::String(unquoted.to_string()))
            }
        }
        Value::Array(items) => {
            let inner = raw.trim_start_matches('[').trim_end_matches(']');
            let like = items.first().cloned().unwrap_or(Value::String(String::new()));
            let parts: Vec<&str> = inner.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
            parts.iter().map(|p| parse_scalar(p, &like)).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        Value::Object(_) => None,
    }
}

fn same_kind(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(x), Value::Number(y)) => x.is_f64() || !y.is_f64(),
        _ => std::mem::discriminant(a) == std::mem::discriminant(b),
    }
}

/// Mutable flat view of a typed config.
pub struct Layered {
    flat: BTreeMap<String, Value>,
}

impl Layered {
    pub fn new<T: Serialize>(base: &T) -> Result<Layered> {
        Ok(Layered { flat: flatten(&serde_json::to_value(base)?) })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.flat.keys().map(String::as_str)
    }

    fn slot(&mut self, key: &str) -> Result<&mut Value> {
        if !self.flat.contains_key(key) {
            let valid: Vec<&str> = self.keys().collect();
            return Err(config_err!("unknown config key `{key}`; valid keys: {}", valid.join(", ")));
        }
        Ok(self.flat.get_mut(key).unwrap())
    }

    /// `key=value` with the value parsed like the current one.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err!("override `{assignment}` is not of the form key=value"))?;
        let key = key.trim();
        let slot = self.slot(key)?;
        let v = parse_scalar(raw, slot).ok_or_else(|| config_err!("cannot parse `{}` for key `{key}` (current value {slot})", raw.trim()))?;
        *slot = v;
        Ok(())
    }

    pub fn set_value(&mut self, key: &str, v: Value) -> Result<()> {
        let slot = self.slot(key)?;
        if !same_kind(slot, &v) {
            return Err(config_err!("key `{key}` expects a value like {slot}, got {v}"));
        }
        *slot = v;
        Ok(())
    }

    /// Applies a TOML-style document (`[section]` headers, `key = value` lines).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let doc: toml::Value = toml::from_str(text).map_err(|e| config_err!("config file: {e}"))?;
        let json = serde_json::to_value(doc)?;
        for (k, v) in flatten(&json) {
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    pub fn build<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(unflatten(&self.flat)).map_err(|e| config_err!("{e}"))
    }
}

/// Flat-key TOML rendering: one section per top-level key.
pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    let flat = flatten(&serde_json::to_value(cfg)?);
    let line = |k: &str, v: &Value| if v.is_null() { format!("# {k} unset\n") } else { format!("{k} = {v}\n") };
    // bare keys must precede the first section header
    let mut out: String = flat.iter().filter(|(k, _)| !k.contains('.')).map(|(k, v)| line(k, v)).collect();
    let mut section = "";
    for (k, v) in &flat {
        let Some((sec, rest)) = k.split_once('.') else { continue };
        if sec != section {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{sec}]\n"));
            section = sec;
        }
        out.push_str(&line(rest, v));
    }
    Ok(out)
}
