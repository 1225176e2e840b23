//! Run configuration embedded in every artifact, artifact writers, and the
//! error classes behind the exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything that shaped a run: the subcommand, the library version, and
/// the flag values (input paths included, the output directory not, so the
/// same run into two directories produces identical bytes).
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub args: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            version: VERSION.to_string(),
            args: BTreeMap::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.args.insert(key.to_string(), serde_json::to_value(value).expect("flag value"));
        self
    }

    /// One-line stamp for the top of CSV artifacts.
    pub fn stamp(&self) -> String {
        format!("# sevmix {} {}", self.version, serde_json::to_string(self).expect("run config"))
    }
}

#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Fit(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Fit(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Parse(_) => "parse",
            CliError::Fit(_) => "fit",
            CliError::Io(_) => "io",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Fit(m) | CliError::Io(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.class(), "message": self.message() }).to_string()
    }
}

impl From<sevmix::error::Error> for CliError {
    fn from(e: sevmix::error::Error) -> Self {
        use sevmix::error::Error::*;
        match e {
            Schema(_) | Data(_) | Domain(_) => CliError::Parse(e.to_string()),
            _ => CliError::Fit(e.to_string()),
        }
    }
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// JSON artifact: `{"run": ..., "<key>": payload}`.
pub fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    run: &RunConfig,
    key: &str,
    payload: &T,
) -> Result<PathBuf, CliError> {
    let mut map = serde_json::Map::new();
    map.insert("run".to_string(), serde_json::to_value(run).expect("run config"));
    map.insert(
        key.to_string(),
        serde_json::to_value(payload).map_err(|e| CliError::Fit(format!("serialize {key}: {e}")))?,
    );
    let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("artifact");
    text.push('\n');
    write_file(dir, name, &text)
}

/// CSV artifact with the run stamp as a leading comment line.
pub fn write_csv(dir: &Path, name: &str, run: &RunConfig, body: &str) -> Result<PathBuf, CliError> {
    let contents = format!("{}\n{body}", run.stamp());
    write_file(dir, name, &contents)
}
