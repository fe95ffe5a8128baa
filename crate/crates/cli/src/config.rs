//! Optional TOML configuration file.
//!
//! Keys are looked up in the table named after the subcommand first and then
//! at the top level, so
//!
//! ```toml
//! seed = 3
//!
//! [train]
//! epochs = 60
//! lr = 1e-3
//! ```
//!
//! sets the seed of every subcommand and the epochs and learning rate of
//! `train`. Key names are the long flag names with `-` or `_`.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
    section: String,
}

fn find<'a>(t: &'a toml::Table, key: &str, alt: &str) -> Option<&'a toml::Value> {
    t.get(key).or_else(|| t.get(alt))
}

impl ConfigFile {
    pub fn load(path: Option<&Path>, section: &str) -> Result<Self, CliError> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config file {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("config file {}: {e}", p.display())))?
            }
        };
        Ok(Self {
            table,
            section: section.to_string(),
        })
    }

    fn raw(&self, key: &str) -> Option<&toml::Value> {
        let alt = key.replace('-', "_");
        let section = self.table.get(&self.section).and_then(|v| v.as_table());
        section
            .and_then(|t| find(t, key, &alt))
            .or_else(|| find(&self.table, key, &alt).filter(|v| !v.is_table()))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::Config(format!("config key {key}: {e}"))),
        }
    }

    /// `flag` (which already includes the environment fallback), then the
    /// file, then `default`.
    pub fn pick<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    pub fn pick_opt<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError> {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.get(key)?,
        })
    }
}
