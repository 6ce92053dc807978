use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseStat {
    pub name: String,
    pub wall_seconds: f64,
    /// Process resident-set high-water mark when the phase ended.
    pub peak_rss_kib: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub metrics: Value,
    pub phases: Vec<PhaseStat>,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `VmHWM` from `/proc/self/status`, where available.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

pub struct Phases {
    stats: Vec<PhaseStat>,
}

impl Phases {
    pub fn new() -> Self {
        Self { stats: Vec::new() }
    }

    pub fn run<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stats.push(PhaseStat {
            name: name.to_string(),
            wall_seconds: start.elapsed().as_secs_f64(),
            peak_rss_kib: peak_rss_kib(),
        });
        out
    }

    pub fn finish(self) -> Vec<PhaseStat> {
        self.stats
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
