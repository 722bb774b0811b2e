//! Report container: named CSV bodies plus run bookkeeping.

use std::fs;
use std::io;
use std::path::Path;

/// Output of one experiment: deterministic CSV bodies keyed by file name,
/// plus bookkeeping that does not take part in byte-identity checks.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub files: Vec<(String, String)>,
    pub summary: String,
    pub replications: usize,
    pub failed_replications: usize,
}

impl ExperimentReport {
    pub fn push_file(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body));
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_str())
    }

    /// True when every replication failed (divergence-dominated run).
    pub fn is_divergence_dominated(&self) -> bool {
        self.replications > 0 && self.failed_replications == self.replications
    }

    /// Write all CSV bodies into `dir` (created if missing).
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in &self.files {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// 17-significant-digit float formatting used by every CSV column.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}
