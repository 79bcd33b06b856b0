//! External simulators: one subprocess per evaluation, one JSON line in,
//! one JSON line out.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rnamf::active_learning::Simulator;
use rnamf::benchmarks::Problem;

use crate::error::CliError;
use crate::io;

pub const DEFAULT_TIMEOUT_SECS: f64 = 300.0;

#[derive(Serialize)]
struct Request<'a> {
    level: usize,
    x: &'a [f64],
}

#[derive(Deserialize)]
struct Reply {
    y: f64,
}

/// A command line split on whitespace: program followed by arguments.
#[derive(Debug, Clone)]
pub struct AdapterSpec {
    pub program: String,
    pub args: Vec<String>,
}

impl AdapterSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let mut parts = spec.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| CliError::usage("empty adapter command"))?;
        Ok(AdapterSpec { program, args: parts.collect() })
    }
}

/// Run the adapter once for `(level, x)`.
pub fn invoke(spec: &AdapterSpec, level: usize, x: &[f64], timeout: Duration) -> Result<f64, CliError> {
    let mut child = Command::new(&spec.program)
        .args(&spec.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| CliError::adapter(format!("cannot start '{}': {e}", spec.program)))?;
    let mut line = serde_json::to_string(&Request { level, x }).expect("request serializes");
    line.push('\n');
    {
        let mut stdin = child.stdin.take().expect("stdin is piped");
        // A child that exits without reading its input is reported below.
        let _ = stdin.write_all(line.as_bytes());
    }
    let stdout = child.stdout.take().expect("stdout is piped");
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut first = String::new();
        let mut reader = BufReader::new(stdout);
        let res = reader.read_line(&mut first).map(|_| first);
        let mut rest = String::new();
        let _ = reader.read_to_string(&mut rest);
        let _ = tx.send(res);
    });
    let out = match rx.recv_timeout(timeout) {
        Ok(r) => r,
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(CliError::adapter(format!(
                "'{}' timed out after {:.1} s at level {level}",
                spec.program,
                timeout.as_secs_f64()
            )));
        }
    };
    let status = child.wait().map_err(|e| CliError::adapter(format!("waiting for '{}': {e}", spec.program)))?;
    if !status.success() {
        let mut msg = String::new();
        let _ = stderr.read_to_string(&mut msg);
        return Err(CliError::adapter(format!("'{}' exited with {status}: {}", spec.program, msg.trim())));
    }
    let first = out.map_err(|e| CliError::adapter(format!("reading from '{}': {e}", spec.program)))?;
    let reply: Reply = serde_json::from_str(first.trim())
        .map_err(|e| CliError::adapter(format!("'{}' wrote {:?}, expected {{\"y\": number}}: {e}", spec.program, first.trim())))?;
    if !reply.y.is_finite() {
        return Err(CliError::adapter(format!("'{}' returned a non-finite output", spec.program)));
    }
    Ok(reply.y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    level: usize,
    x: Vec<f64>,
    y: f64,
}

/// Evaluations keyed by level and the exact bits of `x`; simulators are
/// deterministic, so a repeated query is never re-run.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: BTreeMap<(usize, Vec<u64>), (Vec<f64>, f64)>,
}

impl EvalCache {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Ok(EvalCache::default());
        }
        let entries: Vec<CacheEntry> = io::read_json(path, "evaluation cache")?;
        let mut cache = EvalCache::default();
        for e in entries {
            cache.insert(e.level, &e.x, e.y);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let entries: Vec<CacheEntry> =
            self.map.iter().map(|((level, _), (x, y))| CacheEntry { level: *level, x: x.clone(), y: *y }).collect();
        io::write_json(path, &entries)
    }

    fn key(level: usize, x: &[f64]) -> (usize, Vec<u64>) {
        (level, x.iter().map(|v| v.to_bits()).collect())
    }

    pub fn get(&self, level: usize, x: &[f64]) -> Option<f64> {
        self.map.get(&Self::key(level, x)).map(|e| e.1)
    }

    pub fn insert(&mut self, level: usize, x: &[f64], y: f64) {
        self.map.insert(Self::key(level, x), (x.to_vec(), y));
    }
}

pub enum Backend {
    Builtin(Problem),
    /// One adapter per level, or a single adapter serving every level.
    External { adapters: Vec<AdapterSpec>, timeout: Duration },
}

/// Simulator front end with caching; remembers the first failure so the
/// caller can report it with the right exit code.
pub struct CachedSimulator {
    pub backend: Backend,
    pub cache: EvalCache,
    pub cache_path: Option<PathBuf>,
    pub invocations: usize,
    pub failure: Option<CliError>,
}

impl CachedSimulator {
    pub fn evaluate(&mut self, level: usize, x: &[f64]) -> Result<f64, CliError> {
        if let Some(y) = self.cache.get(level, x) {
            return Ok(y);
        }
        let y = match &self.backend {
            Backend::Builtin(p) => p.evaluate(level, x).map_err(|e| CliError::adapter(e.to_string()))?,
            Backend::External { adapters, timeout } => {
                let spec = if adapters.len() == 1 { &adapters[0] } else { &adapters[level - 1] };
                self.invocations += 1;
                invoke(spec, level, x, *timeout)?
            }
        };
        self.cache.insert(level, x, y);
        if let Some(p) = &self.cache_path {
            self.cache.save(p)?;
        }
        Ok(y)
    }
}

impl Simulator for CachedSimulator {
    fn simulate(&mut self, level: usize, x: &[f64]) -> rnamf::Result<f64> {
        self.evaluate(level, x).map_err(|e| {
            let msg = e.message.clone();
            self.failure = Some(e);
            rnamf::Error::Simulator(msg)
        })
    }
}
