use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub status: RunStatus,
    /// Paths relative to the experiment output directory.
    pub checkpoint: Option<String>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
    /// Unix seconds.
    pub started: Option<u64>,
    pub finished: Option<u64>,
    /// Least-squares slope of the training loss over the last tenth of steps.
    pub final_loss_slope: Option<f64>,
}

impl RunEntry {
    fn pending() -> Self {
        Self {
            status: RunStatus::Pending,
            checkpoint: None,
            outputs: Vec::new(),
            error: None,
            started: None,
            finished: None,
            final_loss_slope: None,
        }
    }
}

/// Persistent record of a sweep: the config hash and one entry per run, in
/// run order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub runs: BTreeMap<String, RunEntry>,
    #[serde(skip)]
    path: PathBuf,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// Opens the manifest at `path`, or starts a new one. A manifest written
    /// for a different config is refused unless `force` is set, in which
    /// case (as for any forced run) every entry is reset to pending.
    pub fn open(path: &Path, experiment: &str, config_hash: &str, run_ids: &[String], force: bool) -> Result<Self> {
        let mut m = if path.exists() && !force {
            let text = fs::read_to_string(path)?;
            let mut m: Self = serde_json::from_str(&text)
                .map_err(|e| Error::File { path: path.display().to_string(), message: e.to_string() })?;
            if m.config_hash != config_hash {
                return Err(Error::Config(format!(
                    "{} was written for a different config (hash {}); rerun with force to replace it",
                    path.display(),
                    m.config_hash
                )));
            }
            m.path = path.to_path_buf();
            m
        } else {
            Self {
                experiment: experiment.to_string(),
                config_hash: config_hash.to_string(),
                runs: BTreeMap::new(),
                path: path.to_path_buf(),
            }
        };
        for id in run_ids {
            m.runs.entry(id.clone()).or_insert_with(RunEntry::pending);
        }
        m.runs.retain(|id, _| run_ids.contains(id));
        Ok(m)
    }

    pub fn is_complete(&self, id: &str) -> bool {
        self.runs.get(id).is_some_and(|e| e.status == RunStatus::Complete)
    }

    pub fn entry_mut(&mut self, id: &str) -> &mut RunEntry {
        self.runs.entry(id.to_string()).or_insert_with(RunEntry::pending)
    }

    pub fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn count(&self, status: RunStatus) -> usize {
        self.runs.values().filter(|e| e.status == status).count()
    }
}
