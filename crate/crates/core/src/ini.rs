//! Flat INI files: `[section]` headers and `key = value` lines. `#` and `;`
//! start comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Section {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::config(
                    format!("{}.{}", self.name, k),
                    format!("unknown key (allowed: {})", allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }

    /// Parses `key` if present.
    pub fn parse<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|_| Error::config(format!("{}.{}", self.name, key), format!("cannot parse `{}`", raw))),
        }
    }

    pub fn parse_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true" | "yes" | "on" | "1") => Ok(Some(true)),
            Some("false" | "no" | "off" | "0") => Ok(Some(false)),
            Some(raw) => Err(Error::config(
                format!("{}.{}", self.name, key),
                format!("expected a boolean, got `{}`", raw),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<Section>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split_once(['#', ';']).map(|(a, _)| a).unwrap_or(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if sections.iter().any(|s| s.name == name) {
                    return Err(Error::config(
                        format!("line {}", lineno + 1),
                        format!("duplicate section [{}]", name),
                    ));
                }
                sections.push(Section::new(name));
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{}`", line),
                ));
            };
            let Some(section) = sections.last_mut() else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    "key outside of any [section]",
                ));
            };
            let key = k.trim();
            if section.get(key).is_some() {
                return Err(Error::config(format!("{}.{}", section.name, key), "key given twice"));
            }
            section.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(Ini { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        for s in &self.sections {
            if !allowed.contains(&s.name.as_str()) {
                return Err(Error::config(
                    format!("[{}]", s.name),
                    format!("unknown section (allowed: {})", allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, v) in &s.entries {
                let _ = writeln!(out, "{} = {}", k, v);
            }
        }
        out
    }
}
