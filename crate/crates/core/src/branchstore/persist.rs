//! On-disk layout of a simulation directory.
//!
//! ```text
//! <root>/scenario.json
//! <root>/store.json
//! <root>/branches/<branch_id>/manifest.json
//! <root>/branches/<branch_id>/events.log          one event record per line
//! <root>/branches/<branch_id>/trajectory.log      one TickRecord per line
//! <root>/branches/<branch_id>/snapshots/tick-<N>.json
//! <root>/branches/<branch_id>/transcripts/tick-<T>-<agent>.json
//! ```
//!
//! Every file holds canonical JSON. Logs are append-only; a line is only
//! considered written once its terminating newline is on disk, so a torn
//! tail left by a crash is truncated on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BranchId, SeedEpoch};
use crate::canonical::to_canonical_string;
use crate::model::{AgentId, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(super) struct StoreMeta {
    pub format_version: u32,
    pub simulation_id: String,
    pub next_branch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(super) struct Manifest {
    pub format_version: u32,
    pub branch_id: BranchId,
    pub parent_id: Option<BranchId>,
    pub fork_tick: Tick,
    pub seed: u64,
    pub seed_epochs: Vec<SeedEpoch>,
    pub label: String,
    pub prompt_version: String,
}

#[derive(Debug, Clone)]
pub(super) struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scenario(&self) -> PathBuf {
        self.root.join("scenario.json")
    }

    pub fn store_meta(&self) -> PathBuf {
        self.root.join("store.json")
    }

    pub fn branches(&self) -> PathBuf {
        self.root.join("branches")
    }

    pub fn branch_dir(&self, id: &BranchId) -> PathBuf {
        self.branches().join(id.as_str())
    }

    pub fn manifest(&self, id: &BranchId) -> PathBuf {
        self.branch_dir(id).join("manifest.json")
    }

    pub fn events(&self, id: &BranchId) -> PathBuf {
        self.branch_dir(id).join("events.log")
    }

    pub fn trajectory(&self, id: &BranchId) -> PathBuf {
        self.branch_dir(id).join("trajectory.log")
    }

    pub fn snapshots(&self, id: &BranchId) -> PathBuf {
        self.branch_dir(id).join("snapshots")
    }

    pub fn snapshot(&self, id: &BranchId, tick: Tick) -> PathBuf {
        self.snapshots(id).join(format!("tick-{}.json", tick.0))
    }

    pub fn transcripts(&self, id: &BranchId) -> PathBuf {
        self.branch_dir(id).join("transcripts")
    }

    pub fn transcript(&self, id: &BranchId, tick: Tick, agent: &AgentId) -> PathBuf {
        self.transcripts(id).join(format!("tick-{}-{}.json", tick.0, agent))
    }

    pub fn create_branch_dirs(&self, id: &BranchId) -> io::Result<()> {
        fs::create_dir_all(self.snapshots(id))?;
        fs::create_dir_all(self.transcripts(id))
    }
}

fn encode<T: Serialize>(value: &T) -> io::Result<String> {
    to_canonical_string(value).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub(super) fn decode<T: DeserializeOwned>(text: &str, path: &Path) -> io::Result<T> {
    serde_json::from_str(text).map_err(|e| {
        io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
    })
}

/// Writes `value` through a temporary file and a rename.
pub(super) fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = encode(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    {
        let mut file = File::create(&tmp)?;
        file.write_all(text.as_bytes())?;
        file.sync_data()?;
    }
    fs::rename(tmp, path)
}

pub(super) fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    decode(&fs::read_to_string(path)?, path)
}

/// Appends one canonical record plus newline with a single write.
pub(super) fn append_line<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut line = encode(value)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    file.flush()
}

/// Reads complete lines, truncating any torn tail (bytes after the last
/// newline, or a final line that does not decode).
pub(super) fn read_log<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut records = Vec::new();
    let mut good_len = 0usize;
    let mut start = 0usize;
    while let Some(offset) = bytes[start..].iter().position(|b| *b == b'\n') {
        let end = start + offset;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        match decode::<T>(line, path) {
            Ok(record) => records.push(record),
            Err(e) if end + 1 == bytes.len() => {
                tracing::warn!("dropping undecodable final line: {e}");
                break;
            }
            Err(e) => return Err(e),
        }
        start = end + 1;
        good_len = start;
    }
    if good_len < bytes.len() {
        tracing::warn!(path = %path.display(), "truncating torn log tail");
        OpenOptions::new().write(true).open(path)?.set_len(good_len as u64)?;
    }
    Ok(records)
}

/// Tick encoded in a `tick-N...json` file name.
pub(super) fn tick_of(path: &Path) -> Option<Tick> {
    let name = path.file_stem()?.to_str()?.strip_prefix("tick-")?;
    let digits = name.split('-').next()?;
    digits.parse().ok().map(Tick)
}

pub(super) fn list_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for entry in entries {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    out.push(path);
                }
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    out.sort();
    Ok(out)
}
