//! Run ledger with content-addressed stage caching.
//!
//! A stage's key hashes its name, seed, parameters and the content hashes of
//! the upstream artifacts it reads. Its outputs live in
//! `stages/<name>-<key prefix>/` and every file there is hashed into the
//! ledger. Re-running a completed stage whose key and outputs are unchanged
//! does nothing. `ledger.json` at the output root is the only file that is
//! not itself listed in the ledger.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const LEDGER_FILE: &str = "ledger.json";

/// Bump when a stage's semantics change so that old caches are not reused.
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub status: StageStatus,
    pub seed: u64,
    pub params: Value,
    /// Upstream artifact path (relative to the output root) → sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Directory holding the outputs, relative to the output root.
    pub dir: String,
    pub wall_clock_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLedger {
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(skip)]
    root: PathBuf,
}

/// One unit of work for [`RunLedger::run`].
pub struct Stage<'a, P: Serialize> {
    pub name: String,
    pub seed: u64,
    pub params: &'a P,
    /// Names of completed stages whose outputs this stage reads.
    pub inputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file below `dir`, relative to `root`, in sorted order.
pub fn list_files(root: &Path, dir: &Path) -> std::io::Result<Vec<String>> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut rel: Vec<String> = files
        .iter()
        .map(|p| rel_path(root, p))
        .collect();
    rel.sort();
    Ok(rel)
}

fn rel_path(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn dir_name(stage: &str, key: &str) -> String {
    let safe: String = stage
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("stages/{safe}-{}", &key[..12])
}

impl RunLedger {
    /// Loads `root/ledger.json` if present, otherwise starts empty.
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(LEDGER_FILE);
        let mut ledger: RunLedger = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            RunLedger::default()
        };
        ledger.root = root.to_path_buf();
        Ok(ledger)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.root.join(LEDGER_FILE), text + "\n")?;
        Ok(())
    }

    pub fn get(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.get(stage)
    }

    /// Absolute output directory of a completed stage.
    pub fn dir(&self, stage: &str) -> Option<PathBuf> {
        self.stages.get(stage).map(|r| self.root.join(&r.dir))
    }

    fn outputs_intact(&self, r: &StageRecord) -> bool {
        let listed = list_files(&self.root, &self.root.join(&r.dir)).unwrap_or_default();
        listed.len() == r.outputs.len()
            && r.outputs
                .iter()
                .all(|(p, h)| sha256_file(&self.root.join(p)).is_ok_and(|x| &x == h))
    }

    /// Runs `work` in the stage's directory unless an identical completed
    /// run is on record. Returns the output directory.
    pub fn run<P: Serialize>(
        &mut self,
        stage: Stage<'_, P>,
        work: impl FnOnce(&Path) -> anyhow::Result<()>,
    ) -> anyhow::Result<PathBuf> {
        let mut inputs = BTreeMap::new();
        for upstream in &stage.inputs {
            match self.stages.get(upstream) {
                Some(r) if r.status == StageStatus::Completed => inputs.extend(r.outputs.clone()),
                _ => {
                    return Err(Failure::Stage {
                        stage: stage.name.clone(),
                        message: format!("upstream stage {upstream} has not completed"),
                    }
                    .into())
                }
            }
        }
        let params = serde_json::to_value(stage.params)?;
        let key_src = serde_json::json!({
            "version": CACHE_VERSION,
            "stage": stage.name,
            "seed": stage.seed,
            "params": params,
            "inputs": inputs,
        });
        let key = hex::encode(Sha256::digest(serde_json::to_vec(&key_src)?));
        if let Some(r) = self.stages.get(&stage.name) {
            if r.key == key && r.status == StageStatus::Completed && self.outputs_intact(r) {
                return Ok(self.root.join(&r.dir));
            }
            let old = self.root.join(&r.dir);
            if old.exists() {
                std::fs::remove_dir_all(&old)?;
            }
        }
        let rel = dir_name(&stage.name, &key);
        let dir = self.root.join(&rel);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;

        let start = Instant::now();
        let result = work(&dir);
        let wall_clock_secs = start.elapsed().as_secs_f64();
        let mut outputs = BTreeMap::new();
        for f in list_files(&self.root, &dir)? {
            let h = sha256_file(&self.root.join(&f))?;
            outputs.insert(f, h);
        }
        let record = StageRecord {
            key,
            status: if result.is_ok() {
                StageStatus::Completed
            } else {
                StageStatus::Failed
            },
            seed: stage.seed,
            params,
            inputs,
            outputs,
            dir: rel,
            wall_clock_secs,
            error: result.as_ref().err().map(|e| format!("{e:#}")),
        };
        self.stages.insert(stage.name.clone(), record);
        self.save()?;
        match result {
            Ok(()) => Ok(dir),
            Err(e) => Err(Failure::Stage {
                stage: stage.name,
                message: format!("{e:#}"),
            }
            .into()),
        }
    }

    /// Files under the output root that no stage lists (the ledger itself excluded).
    pub fn unreachable_files(&self) -> anyhow::Result<Vec<String>> {
        let listed: std::collections::BTreeSet<&String> =
            self.stages.values().flat_map(|r| r.outputs.keys()).collect();
        Ok(list_files(&self.root, &self.root)?
            .into_iter()
            .filter(|f| f != LEDGER_FILE && !listed.contains(f))
            .collect())
    }
}
