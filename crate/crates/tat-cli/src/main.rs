//! `tat` command line: train, infer, eval, flops, augment-preview.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every flag
//! can also be set in a key=value config file (`--config`); flags given
//! on the command line win over file values.

mod commands;

use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use tat_core::graph::ModelConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config keys; exits 2.
    Usage(String),
    /// Everything that went wrong after validation; exits 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<tat_core::Error> for CliError {
    fn from(e: tat_core::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult = Result<(), CliError>;

/// A key=value override file. Keys named like the long flags (with
/// underscores) fill in flags the command line left unset; model keys
/// configure the network graph.
pub struct KvFile {
    map: BTreeMap<String, String>,
    path: PathBuf,
}

impl KvFile {
    pub fn empty() -> KvFile {
        KvFile {
            map: BTreeMap::new(),
            path: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<KvFile, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvFile {
            map,
            path: path.to_path_buf(),
        })
    }

    /// Fill `slot` from the file when the flag was not given.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<(), CliError> {
        if let Some(v) = self.map.remove(key) {
            if slot.is_none() {
                let parsed = v.parse().map_err(|_| {
                    CliError::Usage(format!(
                        "{}: key `{key}`: cannot parse `{v}`",
                        self.path.display()
                    ))
                })?;
                *slot = Some(parsed);
            }
        }
        Ok(())
    }

    /// Pull out the network keys and build the model configuration.
    pub fn model_config(&mut self) -> Result<ModelConfig, CliError> {
        let known: Vec<String> = ModelConfig::default()
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect();
        let mut lines = String::new();
        for k in &known {
            if let Some(v) = self.map.remove(k) {
                lines.push_str(&format!("{k} = {v}\n"));
            }
        }
        let cfg = ModelConfig::from_kv(&lines).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Reject keys nothing consumed, so typos never pass silently.
    pub fn finish(self) -> Result<(), CliError> {
        if let Some(k) = self.map.keys().next() {
            return Err(CliError::Usage(format!(
                "{}: unknown key `{k}`",
                self.path.display()
            )));
        }
        Ok(())
    }
}

/// `WxH`, e.g. 1920x1080.
#[derive(Clone, Copy, Debug)]
pub struct Resolution {
    pub w: usize,
    pub h: usize,
}

impl FromStr for Resolution {
    type Err = String;
    fn from_str(s: &str) -> Result<Resolution, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
        let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
        if w == 0 || h == 0 {
            return Err("resolution sides must be positive".into());
        }
        Ok(Resolution { w, h })
    }
}

#[derive(Parser)]
#[command(name = "tat", version, about = "Multi-oriented scene text detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a detector and write checkpoints plus a loss history.
    Train(commands::TrainArgs),
    /// Run a checkpoint over images and write detection files.
    Infer(commands::InferArgs),
    /// Score detection files against ground truth.
    Eval(commands::EvalArgs),
    /// Static cost analysis of a network configuration.
    Flops(commands::FlopsArgs),
    /// Write augmented patches with boxes drawn, for visual inspection.
    AugmentPreview(commands::PreviewArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => commands::train(args),
        Cmd::Infer(args) => commands::infer(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Flops(args) => commands::flops(args),
        Cmd::AugmentPreview(args) => commands::augment_preview(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
