//! Run bookkeeping: every subcommand leaves a `run.json` next to its
//! artifacts with the resolved config, seed, git revision and timings.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fpf_core::container::{sha256_hex, Tensor};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io;

pub const RUN_MANIFEST: &str = "run.json";

pub struct Run {
    pub command: String,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: usize,
    pub deterministic: bool,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    timings: Vec<(String, f64)>,
    started: Instant,
}

#[derive(Serialize)]
struct Timing {
    stage: String,
    seconds: f64,
}

#[derive(Serialize)]
struct Output {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    git_revision: String,
    config: serde_json::Value,
    seed: Option<u64>,
    threads: usize,
    deterministic: bool,
    inputs: Vec<String>,
    outputs: Vec<Output>,
    timings: Vec<Timing>,
    total_seconds: f64,
}

fn git_revision() -> String {
    let run = |args: &[&str]| {
        Command::new("git")
            .args(args)
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
    };
    match run(&["rev-parse", "HEAD"]) {
        Some(rev) if !rev.is_empty() => {
            let dirty = run(&["status", "--porcelain"]).is_some_and(|s| !s.is_empty());
            if dirty {
                format!("{rev}-dirty")
            } else {
                rev
            }
        }
        _ => "unknown".into(),
    }
}

impl Run {
    pub fn new(command: &str, out: &Path, seed: Option<u64>, threads: usize, deterministic: bool) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
        Ok(Run {
            command: command.into(),
            out: out.to_path_buf(),
            seed,
            threads,
            deterministic,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn record_config<T: Serialize>(&mut self, cfg: &T) -> CliResult<()> {
        self.config = serde_json::to_value(cfg).map_err(CliError::runtime)?;
        Ok(())
    }

    pub fn time<T, E>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, E>) -> CliResult<T>
    where
        CliError: From<E>,
    {
        let t = Instant::now();
        let r = f()?;
        self.timings.push((stage.into(), t.elapsed().as_secs_f64()));
        Ok(r)
    }

    pub fn write_tensor(&mut self, name: &str, t: &Tensor) -> CliResult<()> {
        io::write_tensor(&self.out.join(name), t)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        io::write_json(&self.out.join(name), v)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        io::write_text(&self.out.join(name), text)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn finish(self) -> CliResult<()> {
        let mut outputs = Vec::new();
        for file in &self.outputs {
            let bytes = std::fs::read(self.out.join(file)).map_err(CliError::runtime)?;
            outputs.push(Output { file: file.clone(), sha256: sha256_hex(&bytes) });
        }
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            git_revision: git_revision(),
            config: self.config,
            seed: self.seed,
            threads: self.threads,
            deterministic: self.deterministic,
            inputs: self.inputs,
            outputs,
            timings: self.timings.into_iter().map(|(stage, seconds)| Timing { stage, seconds }).collect(),
            total_seconds: self.started.elapsed().as_secs_f64(),
        };
        io::write_json(&self.out.join(RUN_MANIFEST), &manifest)
    }
}
