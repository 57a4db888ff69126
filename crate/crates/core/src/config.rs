//! Flat `key = value` configuration text with `[section]` headers.
//!
//! ```text
//! # comment
//! iterations = 8000
//! [crf]
//! iterations = 10      # becomes `crf.iterations`
//! ```

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Section-qualified key, e.g. `crf.iterations`.
    pub key: String,
    pub value: String,
    pub line: usize,
    /// 1-based column of the value's first character.
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDoc {
    pub entries: Vec<Entry>,
    /// Section names in order of first appearance, including empty sections.
    pub sections: Vec<String>,
}

fn config_error(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        column,
        message: message.into(),
    }
}

fn is_key(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        let mut sections: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            let indent = content.len() - content.trim_start().len();
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(config_error(line_no, indent + trimmed.len() + 1, "expected `]` closing the section"));
                };
                let name = name.trim();
                if !is_key(name) {
                    return Err(config_error(line_no, indent + 2, format!("invalid section name `{name}`")));
                }
                section = name.to_string();
                if !sections.contains(&section) {
                    sections.push(section.clone());
                }
                continue;
            }
            let Some(eq) = content.find('=') else {
                return Err(config_error(line_no, indent + 1, "expected `key = value`"));
            };
            let key = content[..eq].trim();
            if !is_key(key) {
                return Err(config_error(line_no, indent + 1, format!("invalid key `{key}`")));
            }
            let after = &content[eq + 1..];
            let value = after.trim();
            let column = eq + 2 + (after.len() - after.trim_start().len());
            if value.is_empty() {
                return Err(config_error(line_no, eq + 2, format!("missing value for `{key}`")));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some(prev) = entries.iter().find(|e| e.key == full) {
                return Err(config_error(
                    line_no,
                    indent + 1,
                    format!("duplicate key `{full}` (first set on line {})", prev.line),
                ));
            }
            entries.push(Entry {
                key: full,
                value: value.to_string(),
                line: line_no,
                column,
            });
        }
        Ok(Self { entries, sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

impl Entry {
    pub fn error(&self, message: impl Into<String>) -> Error {
        config_error(self.line, self.column, format!("`{}`: {}", self.key, message.into()))
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.error(format!("cannot parse `{}`", self.value)))
    }

    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(self.error(format!("expected a boolean, got `{other}`"))),
        }
    }

    /// Comma-separated list.
    pub fn parse_list<T: std::str::FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| self.error(format!("cannot parse list element `{}`", v.trim())))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_qualify_keys() {
        let doc = ConfigDoc::parse("a = 1\n[crf]\n  iterations = 5 # note\n").unwrap();
        assert_eq!(doc.get("a").unwrap().value, "1");
        let e = doc.get("crf.iterations").unwrap();
        assert_eq!((e.value.as_str(), e.line, e.column), ("5", 3, 16));
        let doc = ConfigDoc::parse("[a]\n[b]\nx = 1\n[a]\n").unwrap();
        assert_eq!(doc.sections, ["a", "b"]);
    }

    #[test]
    fn errors_carry_positions() {
        let err = ConfigDoc::parse("a = 1\nbogus line\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, column: 1, .. }), "{err}");
        let err = ConfigDoc::parse("[crf\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = ConfigDoc::parse("x =   \n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, column: 4, .. }), "{err}");
        let err = ConfigDoc::parse("x = 1\nx = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn typed_values() {
        let doc = ConfigDoc::parse("n = 12\nb = yes\nl = 1, 2,3\nbad = 1.5x\n").unwrap();
        assert_eq!(doc.get("n").unwrap().parse::<usize>().unwrap(), 12);
        assert!(doc.get("b").unwrap().parse_bool().unwrap());
        assert_eq!(doc.get("l").unwrap().parse_list::<u32>().unwrap(), vec![1, 2, 3]);
        let err = doc.get("bad").unwrap().parse::<f64>().unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, column: 7, .. }), "{err}");
    }
}
