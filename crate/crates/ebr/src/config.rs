//! Run configuration files.
//!
//! Two syntaxes are accepted: a JSON object, or `key = value` lines where
//! keys may be dotted (`weights.engagement = 0.2`, `tower.heads = 4`). Values
//! on the right are parsed as JSON when they can be and taken as strings
//! otherwise. `#` starts a comment line. Whatever is given is merged over the
//! default configuration and every key must name an existing field.

use std::fs;
use std::path::Path;

use ebr_core::training::{Arm, RunConfig};
use serde_json::{Map, Value};

use crate::error::{EbrError, Result};

/// Parses `text` (JSON or key=value) into a configuration tree.
pub fn parse_tree(text: &str) -> Result<Value> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| EbrError::Config(format!("invalid JSON config: {e}")))?;
        return Ok(v);
    }
    let mut root = Value::Object(Map::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| EbrError::Config(format!("line {}: expected key = value", n + 1)))?;
        set_path(&mut root, key.trim(), parse_value(value.trim()))?;
    }
    Ok(root)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(EbrError::Config(format!("malformed key {key:?}")));
    }
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = as_object(node, key)?;
        let child = obj.entry(part.to_string()).or_insert(Value::Null);
        if child.is_null() {
            *child = Value::Object(Map::new());
        }
        node = child;
    }
    as_object(node, key)?.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn as_object<'a>(v: &'a mut Value, key: &str) -> Result<&'a mut Map<String, Value>> {
    v.as_object_mut().ok_or_else(|| EbrError::Config(format!("{key}: parent is not an object")))
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Every key path in `given` must survive a round trip through `RunConfig`.
fn check_known(given: &Value, parsed: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(g), Value::Object(p)) = (given, parsed) else {
        return Ok(());
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match p.get(k) {
            Some(inner) => check_known(v, inner, &path)?,
            None => return Err(EbrError::Config(format!("unknown key {path:?}"))),
        }
    }
    Ok(())
}

/// Merges `overrides` over the defaults and deserializes.
pub fn from_tree(overrides: &Value) -> Result<RunConfig> {
    if !overrides.is_object() {
        return Err(EbrError::Config("config must be an object".into()));
    }
    let mut tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    merge(&mut tree, overrides);
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| EbrError::Config(e.to_string()))?;
    let back = serde_json::to_value(&config).expect("config serializes");
    check_known(overrides, &back, "")?;
    Ok(config)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    from_tree(&parse_tree(text)?)
}

/// Command-line overrides applied on top of a file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub arm: Option<Arm>,
    pub seed: Option<u64>,
    /// `key=value` pairs with dotted keys.
    pub set: Vec<String>,
}

/// Reads `path` (or the defaults when `None`) and applies `overrides`.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| EbrError::io(p, e))?;
            parse_tree(&text).map_err(|e| match e {
                EbrError::Config(m) => EbrError::Config(format!("{}: {m}", p.display())),
                e => e,
            })?
        }
        None => Value::Object(Map::new()),
    };
    for kv in &overrides.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| EbrError::Config(format!("--set {kv:?}: expected key=value")))?;
        set_path(&mut tree, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(arm) = overrides.arm {
        set_path(&mut tree, "arm", Value::String(arm.name().into()))?;
    }
    if let Some(seed) = overrides.seed {
        set_path(&mut tree, "seed", Value::from(seed))?;
    }
    let config = from_tree(&tree)?;
    config.validate()?;
    Ok(config)
}
