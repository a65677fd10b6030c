//! Flat `key = value` files with `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! preset = defian_l
//! scale = 3
//!
//! [train]
//! lr0 = 1e-4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub line: Option<usize>,
}

/// One section's entries, with lookup helpers that report field-level errors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(
            key.into(),
            Entry {
                value: value.to_string(),
                line: None,
            },
        );
    }

    pub fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    /// Parses `key` if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<V>()
                .map(Some)
                .map_err(|err| Error::config(e.line, self.field(key), format!("cannot parse {:?}: {err}", e.value))),
        }
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<V>().map_err(|err| {
                    Error::config(e.line, self.field(key), format!("cannot parse list item {s:?}: {err}"))
                })
            })
            .collect::<Result<Vec<V>>>()
            .map(Some)
    }

    /// Builds an error pointing at `key`.
    pub fn error(&self, key: &str, msg: impl Into<String>) -> Error {
        let line = self.entries.get(key).and_then(|e| e.line);
        Error::config(line, self.field(key), msg)
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, e) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::config(
                    e.line,
                    self.field(k),
                    format!("unknown key; expected one of {}", known.join(", ")),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, Section>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').map(str::trim).ok_or_else(|| {
                    Error::Config(ConfigError {
                        line: Some(line_no),
                        field: String::new(),
                        msg: format!("malformed section header {line:?}"),
                    })
                })?;
                if name.is_empty() {
                    return Err(Error::config(Some(line_no), "", "empty section name"));
                }
                if out.sections.contains_key(name) {
                    return Err(Error::config(Some(line_no), name, "section declared twice"));
                }
                out.sections.insert(name.to_string(), Section::new(name));
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    Some(line_no),
                    "",
                    format!("expected `key = value`, found {line:?}"),
                ));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(Some(line_no), "", "empty key"));
            }
            let Some(sec) = current.as_ref() else {
                return Err(Error::config(Some(line_no), key, "key outside of any [section]"));
            };
            let section = out.sections.get_mut(sec).expect("current section exists");
            if section.entries.contains_key(key) {
                return Err(Error::config(Some(line_no), section.field(key), "duplicate key"));
            }
            section.entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line: Some(line_no),
                },
            );
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(None, path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn insert(&mut self, section: Section) {
        self.sections.insert(section.name.clone(), section);
    }

    pub fn check_sections(&self, known: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !known.contains(&name.as_str()) {
                return Err(Error::config(
                    None,
                    name.clone(),
                    format!("unknown section; expected one of {}", known.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.values().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, e) in &s.entries {
                let _ = writeln!(out, "{k} = {}", e.value);
            }
        }
        out
    }
}
