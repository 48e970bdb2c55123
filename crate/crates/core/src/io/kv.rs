//! Ordered `key = value` sidecar files used for sample metadata.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Real;

/// An ordered list of string key-value pairs with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_real(&mut self, key: &str, value: Real) {
        self.entries.push((key.to_string(), format!("{value:.17e}")));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_real(&self, key: &str) -> Result<Real> {
        self.get(key)
            .ok_or_else(|| Error::invalid(format!("missing key '{key}'")))?
            .parse()
            .map_err(|_| Error::invalid(format!("key '{key}' is not a real number")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .ok_or_else(|| Error::invalid(format!("missing key '{key}'")))?
            .parse()
            .map_err(|_| Error::invalid(format!("key '{key}' is not an integer")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        super::write_bytes(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = super::read_to_string(path)?;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("line {} lacks '='", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.txt");
        let mut kv = KeyValues::new();
        kv.push("scene", 12);
        kv.push_real("overlap", 0.4375);
        kv.push("digest", "abc123");
        kv.write(&path).unwrap();
        let back = KeyValues::read(&path).unwrap();
        assert_eq!(back.get_usize("scene").unwrap(), 12);
        assert_eq!(back.get_real("overlap").unwrap(), 0.4375);
        assert_eq!(back.get("digest"), Some("abc123"));
        assert_eq!(back.entries()[0].0, "scene");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.txt");
        std::fs::write(&path, "# header\n\na = 1\n").unwrap();
        let kv = KeyValues::read(&path).unwrap();
        assert_eq!(kv.get_usize("a").unwrap(), 1);
    }
}
