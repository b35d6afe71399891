//! Ordered section/key=value text format used by network configs and
//! synthetic dataset specs.
//!
//! ```text
//! # comment
//! [conv]
//! filters = 8
//! kernel = 5
//! ```
//!
//! Sections keep file order (layer stacks are ordered), and duplicate
//! section names are allowed.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Format(format!(
                    "section [{}]: cannot parse {key}={raw}",
                    self.name
                ))
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse(key)?.ok_or_else(|| {
            Error::Format(format!("section [{}]: missing key {key}", self.name))
        })
    }
}

/// Parse a whole document into ordered sections. Keys before the first
/// section header go into an implicit section named "".
pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    let mut current = Section {
        name: String::new(),
        entries: Vec::new(),
    };
    let mut have_content = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Format(format!("line {}: unterminated section header", lineno + 1)))?
                .trim();
            if name.is_empty() {
                return Err(Error::Format(format!("line {}: empty section name", lineno + 1)));
            }
            if have_content || !current.entries.is_empty() {
                sections.push(current);
            }
            current = Section {
                name: name.to_string(),
                entries: Vec::new(),
            };
            have_content = true;
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
        current
            .entries
            .push((key.trim().to_string(), value.trim().to_string()));
    }
    if have_content || !current.entries.is_empty() {
        sections.push(current);
    }
    Ok(sections)
}
