//! Flag/file merging and the resolved-config echo.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

/// Overlays a TOML config file under the parsed flags: a key from the file
/// replaces the flag value unless that flag was given on the command line.
pub fn resolve<T>(parsed: &T, matches: &ArgMatches, file: Option<&Path>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = file else {
        return Ok(toml_round_trip(parsed)?);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let from_file: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut merged = toml::Table::try_from(parsed)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("serializing flags: {e}")))?;
    for (key, value) in from_file {
        let known = matches.ids().any(|id| id.as_str() == key);
        if !known || matches.value_source(&key) != Some(ValueSource::CommandLine) {
            merged.insert(key, value);
        }
    }
    merged
        .try_into()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn toml_round_trip<T: Serialize + DeserializeOwned>(v: &T) -> Result<T, CliError> {
    let table = toml::Table::try_from(v)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("serializing flags: {e}")))?;
    table
        .try_into()
        .map_err(|e| CliError::Usage(format!("{e}")))
}

/// Writes the fully resolved config as TOML; the file is valid `--config`
/// input for the same subcommand.
pub fn write_resolved<T: Serialize>(command: &str, cfg: &T, path: &Path) -> anyhow::Result<()> {
    let body = toml::to_string(cfg)?;
    let text = format!("# ldn {command}\n{body}");
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// `q.opt` + `meta_loss.csv` → `q.meta_loss.csv`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

pub fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))
}

pub fn ensure_parent(file: &Path) -> anyhow::Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}
