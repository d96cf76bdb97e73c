use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key with its default, in echo order.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // corpus
    ("classes", "200"),
    ("items", "10"),
    ("images_min", "2"),
    ("images_max", "6"),
    ("twin_fraction", "0.05"),
    ("triplets_per_item", "1"),
    // model
    ("token_dim", "32"),
    ("heads", "4"),
    ("image_layers", "1"),
    ("title_layers", "1"),
    ("fusion_layers", "2"),
    ("out_dim", "32"),
    ("k_images", "4"),
    // training
    ("epochs1", "20"),
    ("epochs2", "30"),
    ("epochs3", "10"),
    ("lr1", "0.001"),
    ("lr2", "0.0001"),
    ("batch_size", "8"),
    ("gamma", "20"),
    ("margin", "0.2"),
    ("xbm_capacity", "1024"),
    // index
    ("hnsw_m", "16"),
    ("ef_construction", "100"),
    ("ef_search", "200"),
    // serving
    ("addr", "127.0.0.1:8080"),
    ("fusion_weight", "1"),
    ("popularity_weight", "0"),
    ("crop_fraction", "1"),
    ("page_size", "10"),
    // daily job
    ("start_day", "2024-01-01"),
    ("churn", "0.1"),
    ("retention", "7"),
    // eval
    ("eval_views", "1"),
    ("eval_depth", "100"),
    ("weight_grid", "0,0.25,0.5,1,2,4"),
    ("eval_pair", "true"),
    ("merge", "false"),
    ("merge_k", "5"),
];

/// Flat `key = value` settings. Later layers win over earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !self.values.contains_key(key) {
            return Err(Error::Usage(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| Error::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Usage(format!("config {key} = '{v}' is not a valid {}", std::any::type_name::<T>())))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("config {key}: '{s}' is not a number")))
            })
            .collect()
    }

    /// The settings as a config file.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let _ = writeln!(out, "{k} = {}", self.raw(k));
        }
        out
    }
}
