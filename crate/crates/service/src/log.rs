//! Append-only JSON-lines event log.
//!
//! Every state change of the service is one [`Event`] line. A line is
//! written and synced to disk before the caller acknowledges the change, and
//! the full service state is rebuilt by replaying the file from the start.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{ClientMetadata, Gate, GateResult};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt event: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("log belongs to study {found}, service runs study {expected}")]
    StudyMismatch { expected: String, found: String },
    #[error("log does not start with a header event")]
    MissingHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// First line of every log; `key` seeds the opaque tokens handed to clients.
    LogOpened {
        study_id: String,
        key: String,
        at: u64,
    },
    SessionCreated {
        session_id: String,
        subject_id: String,
        ordinal: u64,
        client: ClientMetadata,
        batches: Vec<String>,
        orders: Vec<Vec<String>>,
        at: u64,
    },
    Gate {
        session_id: String,
        gate: Gate,
        result: GateResult,
        payload: serde_json::Value,
        at: u64,
    },
    Response {
        session_id: String,
        question_id: String,
        score: f64,
        toggle_count: u32,
        elapsed_ms: u64,
        at: u64,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (or creates) the log and returns every complete event in it.
    /// A trailing line without its newline is the remnant of an interrupted
    /// append, never acknowledged, and is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<(EventLog, Vec<Event>), LogError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| LogError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;

        let mut events = Vec::new();
        let mut good_len: u64 = 0;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut number = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(io)?;
                if read == 0 {
                    break;
                }
                number += 1;
                if !line.ends_with('\n') {
                    break;
                }
                if !line.trim().is_empty() {
                    let event = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
                        path: path.clone(),
                        line: number,
                        reason: e.to_string(),
                    })?;
                    events.push(event);
                }
                good_len += read as u64;
            }
        }
        if file.metadata().map_err(io)?.len() != good_len {
            file.set_len(good_len).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok((EventLog { path, file }, events))
    }

    /// Writes one event and syncs it to stable storage.
    pub fn append(&mut self, event: &Event) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(event).map_err(|e| LogError::Corrupt {
            path: self.path.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        line.push(b'\n');
        let io = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
