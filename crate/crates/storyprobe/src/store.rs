//! Append-only persistence: per-day event log files plus response and
//! demographics journals, all one JSON document per line.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use storyprobe_core::assessment::ResponseRecord;
use storyprobe_core::narrative::EventRecord;

pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const DEMOGRAPHICS_FILE: &str = "demographics.jsonl";
const EVENTS_DIR: &str = "events";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage failure on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: io::Error,
    },
    #[error("integrity error in session {session}: expected seq {expected}, got {found}")]
    SequenceGap {
        session: String,
        expected: u64,
        found: u64,
    },
    #[error("{file}:{line}: {message}")]
    Corrupt {
        file: String,
        line: usize,
        message: String,
    },
}

/// Where bytes go. The file sink is the only production implementation;
/// tests substitute sinks that fail on demand.
pub trait Sink: Send + Sync {
    /// Appends `data` to the file `name` (relative to the store root) and
    /// returns only once it is durable. On error nothing may remain written.
    fn append(&self, name: &str, data: &[u8]) -> io::Result<()>;
}

#[derive(Debug, Clone)]
pub struct FileSink {
    root: PathBuf,
}

impl FileSink {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl Sink for FileSink {
    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let before = file.metadata()?.len();
        let result = file.write_all(data).and_then(|_| file.sync_data());
        if result.is_err() {
            // Drop any torn tail so the next append starts on a clean line.
            let _ = file.set_len(before);
        }
        result
    }
}

/// Coded demographic answers of one participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicsRecord {
    pub participant_id: String,
    pub timestamp: u64,
    pub fields: BTreeMap<String, String>,
}

pub struct Store {
    root: PathBuf,
    sink: Arc<dyn Sink>,
    last_seq: Mutex<HashMap<String, u64>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish_non_exhaustive()
    }
}

/// `events/events-YYYY-MM-DD.jsonl` for the UTC day of `timestamp_ms`.
pub fn day_file(timestamp_ms: u64) -> String {
    let day = i64::try_from(timestamp_ms)
        .ok()
        .and_then(chrono::DateTime::from_timestamp_millis)
        .map(|t| t.date_naive().format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "out-of-range".into());
    format!("{EVENTS_DIR}/events-{day}.jsonl")
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`, checks that it
    /// is writable and indexes existing event logs.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sink = Arc::new(FileSink::new(root.clone()));
        Self::with_sink(root, sink)
    }

    pub fn with_sink(root: impl Into<PathBuf>, sink: Arc<dyn Sink>) -> Result<Self, StoreError> {
        let root = root.into();
        let io_err = |source| StoreError::Io {
            file: root.display().to_string(),
            source,
        };
        fs::create_dir_all(root.join(EVENTS_DIR)).map_err(io_err)?;
        let probe = root.join(".write-probe");
        fs::write(&probe, b"ok").map_err(io_err)?;
        let _ = fs::remove_file(&probe);

        let store = Self {
            root,
            sink,
            last_seq: Mutex::new(HashMap::new()),
        };
        let logs = store.load_events()?;
        let index = logs
            .iter()
            .map(|(id, log)| (id.clone(), log.last().map_or(0, |r| r.seq)))
            .collect();
        *store.last_seq.lock().expect("store index lock") = index;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Appends a batch of records for one or more sessions. Sequence numbers
    /// must continue each session's persisted log without a gap. The batch
    /// goes to the day file of its first record in a single write, so it is
    /// persisted entirely or not at all.
    pub fn append_events(&self, records: &[EventRecord]) -> Result<(), StoreError> {
        let Some(first) = records.first() else {
            return Ok(());
        };
        let mut index = self.last_seq.lock().expect("store index lock");
        let mut pending: HashMap<&str, u64> = HashMap::new();
        for r in records {
            let last = pending
                .get(r.session_id.as_str())
                .copied()
                .or_else(|| index.get(&r.session_id).copied())
                .unwrap_or(0);
            if r.seq != last + 1 {
                return Err(StoreError::SequenceGap {
                    session: r.session_id.clone(),
                    expected: last + 1,
                    found: r.seq,
                });
            }
            pending.insert(&r.session_id, r.seq);
        }
        let file = day_file(first.timestamp);
        let mut data = String::new();
        for r in records {
            data.push_str(&serde_json::to_string(r).expect("event serializes"));
            data.push('\n');
        }
        self.sink
            .append(&file, data.as_bytes())
            .map_err(|source| StoreError::Io { file, source })?;
        for (id, seq) in pending {
            index.insert(id.to_string(), seq);
        }
        Ok(())
    }

    pub fn last_seq(&self, session_id: &str) -> u64 {
        self.last_seq
            .lock()
            .expect("store index lock")
            .get(session_id)
            .copied()
            .unwrap_or(0)
    }

    fn event_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let dir = self.root.join(EVENTS_DIR);
        let entries = fs::read_dir(&dir).map_err(|source| StoreError::Io {
            file: dir.display().to_string(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("events-") && n.ends_with(".jsonl"))
            })
            .collect();
        files.sort();
        Ok(files)
    }

    /// Every persisted session log, ordered by sequence number and checked
    /// for gaps.
    pub fn load_events(&self) -> Result<BTreeMap<String, Vec<EventRecord>>, StoreError> {
        let mut by_session: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
        for path in self.event_files()? {
            for r in read_jsonl::<EventRecord>(&path)? {
                by_session.entry(r.session_id.clone()).or_default().push(r);
            }
        }
        for (id, log) in by_session.iter_mut() {
            log.sort_by_key(|r| r.seq);
            for (i, r) in log.iter().enumerate() {
                let expected = i as u64 + 1;
                if r.seq != expected {
                    return Err(StoreError::SequenceGap {
                        session: id.clone(),
                        expected,
                        found: r.seq,
                    });
                }
            }
        }
        Ok(by_session)
    }

    pub fn append_response(&self, record: &ResponseRecord) -> Result<(), StoreError> {
        self.append_line(RESPONSES_FILE, record)
    }

    pub fn load_responses(&self) -> Result<Vec<ResponseRecord>, StoreError> {
        read_jsonl(&self.root.join(RESPONSES_FILE))
    }

    pub fn append_demographics(&self, record: &DemographicsRecord) -> Result<(), StoreError> {
        self.append_line(DEMOGRAPHICS_FILE, record)
    }

    /// Latest record per participant.
    pub fn load_demographics(
        &self,
    ) -> Result<BTreeMap<String, BTreeMap<String, String>>, StoreError> {
        let mut records: Vec<DemographicsRecord> =
            read_jsonl(&self.root.join(DEMOGRAPHICS_FILE))?;
        records.sort_by_key(|r| r.timestamp);
        Ok(records
            .into_iter()
            .map(|r| (r.participant_id, r.fields))
            .collect())
    }

    fn append_line<T: Serialize>(&self, file: &str, value: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(value).expect("record serializes");
        line.push('\n');
        self.sink
            .append(file, line.as_bytes())
            .map_err(|source| StoreError::Io {
                file: file.into(),
                source,
            })
    }
}

/// Reads one JSON document per line; a missing file reads as empty.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = path.display().to_string();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(StoreError::Io { file, source }),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                file: file.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
