//! Scenario files: a TOML document holding a `name` and every run setting.
//! Omitted settings take their defaults, and a written-back scenario lists
//! all of them.

use std::path::Path;

use flocknrl_core::fp::FpConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub config: FpConfig,
}

/// Scenarios shipped with the binary, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("simple-4d", include_str!("../scenarios/simple-4d.toml")),
    ("simple-6d", include_str!("../scenarios/simple-6d.toml")),
    ("two-lines-4d", include_str!("../scenarios/two-lines-4d.toml")),
    ("one-obstacle-4d", include_str!("../scenarios/one-obstacle-4d.toml")),
    ("one-obstacle-6d", include_str!("../scenarios/one-obstacle-6d.toml")),
    ("many-obstacles-4d", include_str!("../scenarios/many-obstacles-4d.toml")),
    ("many-obstacles-6d", include_str!("../scenarios/many-obstacles-6d.toml")),
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let name = match table.remove("name") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::Config("`name` must be a string".into())),
            None => return Err(Error::Config("missing `name`".into())),
        };
        let config: FpConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let s = Self { name, config };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must not exceed {}", i64::MAX)));
        }
        self.config.validate().map_err(Error::from)
    }

    /// Full TOML text, defaults included.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        table.insert("name".into(), toml::Value::String(self.name.clone()));
        let body = toml::Table::try_from(&self.config).expect("configs always serialize");
        table.extend(body);
        toml::to_string(&table).expect("tables always serialize")
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("bundled scenarios are valid"))
    }

    /// A bundled scenario name or a path to a scenario file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(s) = Self::bundled(name_or_path) {
            return Ok(s);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "`{name_or_path}` is neither a file nor a bundled scenario ({})",
                names.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
