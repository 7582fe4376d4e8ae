use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Record of one invocation: enough to re-execute it with `volt rerun`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    /// Working directory the relative paths in `argv` refer to.
    pub cwd: PathBuf,
    /// Every parameter after presets, config files and flags were merged.
    pub params: serde_json::Value,
    pub outputs: Vec<String>,
}

/// `OUT/run.json` for directory outputs, `OUT.run.json` otherwise.
pub fn run_log_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

impl RunLog {
    pub fn new(subcommand: &str, argv: &[std::ffi::OsString], params: serde_json::Value, outputs: Vec<String>) -> Self {
        RunLog {
            tool: "volt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            argv: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
            cwd: std::env::current_dir().unwrap_or_default(),
            params,
            outputs,
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(volt_core::Error::from)?;
        std::fs::write(path, text).map_err(|e| CliError::Data(io_error(path, e)))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(io_error(path, e)))?;
        Ok(serde_json::from_str(&text).map_err(volt_core::Error::from)?)
    }

    /// Recorded arguments with the `-o/--out` value replaced by `out`.
    pub fn argv_with_out(&self, out: Option<&Path>) -> Vec<String> {
        let mut args = self.argv.clone();
        let Some(out) = out else { return args };
        let out = out.to_string_lossy().into_owned();
        let mut i = 0;
        while i < args.len() {
            if (args[i] == "-o" || args[i] == "--out") && i + 1 < args.len() {
                args[i + 1] = out.clone();
                i += 1;
            } else if args[i].starts_with("--out=") {
                args[i] = format!("--out={out}");
            }
            i += 1;
        }
        args
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> volt_core::Error {
    volt_core::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
