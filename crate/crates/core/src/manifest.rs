//! Ordered `key = value` text records.
//!
//! Used for model manifests, run manifests and configuration files. A
//! `[section]` header prefixes the keys that follow it with `section.`;
//! `#` starts a comment line.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace, keeping first-insertion order.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Data(format!("missing key `{key}`")))
    }

    /// Parse the value under `key`, if present.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Data(format!("cannot parse `{key}` = `{v}`")))
            })
            .transpose()
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse(key)?.ok_or_else(|| Error::Data(format!("missing key `{key}`")))
    }

    /// Comma-separated floats, written with round-trip precision.
    pub fn set_floats(&mut self, key: impl Into<String>, values: &[f64]) -> &mut Self {
        let s: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        self.set(key, s.join(","))
    }

    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Data(format!("bad number `{s}` in `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Entries under `section.`, with the prefix stripped.
    pub fn section(&self, name: &str) -> Manifest {
        let prefix = format!("{name}.");
        Manifest {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Data(format!("line {}: empty key", no + 1)));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            m.set(key, v.trim());
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sections_and_comments() {
        let m = Manifest::parse_text("# c\nk = 1\n[train]\nepochs=3\n lr = 0.5 \n").unwrap();
        assert_eq!(m.get("k"), Some("1"));
        assert_eq!(m.parse::<usize>("train.epochs").unwrap(), Some(3));
        assert_eq!(m.section("train").get("lr"), Some("0.5"));
        assert!(Manifest::parse_text("novalue\n").is_err());
        assert!(m.parse::<usize>("train.lr").is_err());
    }

    proptest! {
        #[test]
        fn floats_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20)) {
            let mut m = Manifest::new();
            m.set_floats("x", &v);
            let back = Manifest::parse_text(&m.render()).unwrap();
            let got = back.floats("x").unwrap().unwrap();
            prop_assert_eq!(got.len(), v.len());
            for (a, b) in got.iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
