//! Plain-text `key = value` blocks, used for generator configs, run
//! configs, and checkpoint headers. Keys may repeat; order is preserved.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextKvError {
    #[error("line {line}: expected `key = value`, got {content:?}")]
    Malformed { line: usize, content: String },
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
}

#[derive(Debug, Clone, Default)]
pub struct TextKv {
    entries: Vec<(String, String)>,
}

impl TextKv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a block. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, TextKvError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TextKvError::Malformed { line: i + 1, content: raw.to_string() })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(TextKv { entries })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, TextKvError> {
        self.get(key).ok_or_else(|| TextKvError::Missing(key.to_string()))
    }

    pub fn parse_value<T: std::str::FromStr>(
        &self,
        key: &str,
        ty: &'static str,
    ) -> Result<T, TextKvError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| TextKvError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            ty,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Serializes back to text. `parse(render(kv))` preserves entries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
