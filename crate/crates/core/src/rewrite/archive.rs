use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::endpoint::{ChatRequest, ChatResponse};
use crate::error::{Error, Result};

/// Identity of one endpoint call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub essay_id: String,
    /// Rewrite kind (`SAT_3`, `NEUTRAL`) or `VERIFY`.
    pub call: String,
    pub slot: u32,
    pub attempt: u32,
    /// 1 for the first ask, 2 for a verification re-ask.
    pub ask: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    #[serde(flatten)]
    pub key: CallKey,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Append-only JSONL log of successful endpoint calls. Calls already in the
/// log are answered from it, which makes interrupted runs resumable.
pub struct Archive {
    path: Option<PathBuf>,
    seen: Mutex<HashMap<CallKey, ChatResponse>>,
    file: Option<Mutex<File>>,
}

impl Archive {
    /// Archive kept only in memory.
    pub fn in_memory() -> Archive {
        Archive {
            path: None,
            seen: Mutex::new(HashMap::new()),
            file: None,
        }
    }

    pub fn open(path: &Path) -> Result<Archive> {
        let mut seen = HashMap::new();
        let mut torn = false;
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                torn = false;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ArchiveRecord>(&line) {
                    Ok(r) => {
                        seen.insert(r.key, r.response);
                    }
                    // a torn final line from an interrupted write
                    Err(e) => {
                        log::warn!("{}: skipping line {}: {e}", path.display(), n + 1);
                        torn = true;
                    }
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if torn {
            // terminate the partial line so the next record starts clean
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(Archive {
            path: Some(path.to_path_buf()),
            seen: Mutex::new(seen),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn get(&self, key: &CallKey) -> Option<ChatResponse> {
        self.seen.lock().expect("archive lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("archive lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, key: CallKey, request: &ChatRequest, response: &ChatResponse) -> Result<()> {
        if let Some(f) = &self.file {
            let rec = ArchiveRecord {
                key: key.clone(),
                request: request.clone(),
                response: response.clone(),
            };
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            let mut f = f.lock().expect("archive lock");
            // one write call per record keeps lines whole under concurrency
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(self.path.as_deref().unwrap_or(Path::new("archive")), e))?;
        }
        self.seen.lock().expect("archive lock").insert(key, response.clone());
        Ok(())
    }
}
