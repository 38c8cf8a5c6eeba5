use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Environment variable naming the default report directory.
pub const OUT_DIR_VAR: &str = "MCI_OUT_DIR";

/// Top-level report. Field order is the serialisation order; only
/// `wall_time_s` differs between identical runs.
#[derive(Debug, Serialize)]
pub struct RunReport<C: Serialize, R: Serialize> {
    pub command: Vec<String>,
    pub seed: u64,
    pub config: C,
    pub results: R,
    pub wall_time_s: f64,
}

/// Resolves the report destination: `--out` (relative to `$MCI_OUT_DIR`
/// when set), else `$MCI_OUT_DIR/<command>.json`, else stdout.
pub fn destination(out: Option<&Path>, command: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_VAR).map(PathBuf::from);
    match (out, dir) {
        (Some(p), Some(d)) if p.is_relative() => Some(d.join(p)),
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => Some(d.join(format!("{command}.json"))),
        (None, None) => None,
    }
}

pub fn emit<C: Serialize, R: Serialize>(report: &RunReport<C, R>, out: Option<&Path>, command: &str) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match destination(out, command) {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, text)?;
            eprintln!("report written to {}", path.display());
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
