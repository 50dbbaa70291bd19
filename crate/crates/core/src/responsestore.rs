//! Append-only persistence for answers, votes and catalog tables, plus the
//! researcher-facing exports.
//!
//! A store is a single file of newline-terminated JSON entries. Every write
//! opens the file, appends one entry, flushes and closes it again, so a crash
//! can at most leave an unterminated tail line, which readers ignore and the
//! next writer truncates. Nothing already committed is ever rewritten; the
//! `incomplete` flag of a row is expressed as a later marker entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Group, GroupTable};
use crate::clock::{format_timestr, Clock};
use crate::session::{PlayerId, ResponseRecord};
use crate::voting::{ConsensusScore, Vote};

/// Response table names created by [`ResponseStore::ensure_tables`].
pub const ANSWER_TABLES: [(Group, &str); 2] =
    [(Group::A, "answers_group_a"), (Group::B, "answers_group_b")];

pub const VOTES_TABLE: &str = "votes";
pub const CONSENSUS_TABLE: &str = "consensus";

/// Name of the single table inside an export file.
pub const EXPORT_TABLE: &str = "answer";

/// Columns of an exported answer table.
pub const EXPORT_COLUMNS: [&str; 8] = [
    "player_id",
    "dilemma_id",
    "response",
    "timestamp",
    "room_id",
    "category",
    "attempt",
    "incomplete",
];

const EXPORT_FORMAT: &str = "dilemma-export-v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("store corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("export table must be 1 or 2, got {0}")]
    BadTable(u8),
    #[error("export io: {0}")]
    IoError(#[from] io::Error),
    #[error("export format: {0}")]
    Format(String),
}

pub fn answer_table(group: Group) -> &'static str {
    match group {
        Group::A => ANSWER_TABLES[0].1,
        Group::B => ANSWER_TABLES[1].1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRow {
    #[serde(flatten)]
    pub record: ResponseRecord,
    #[serde(default)]
    pub incomplete: bool,
    pub session_seed: u64,
}

impl StoredRow {
    pub fn new(record: ResponseRecord, session_seed: u64) -> Self {
        Self {
            record,
            incomplete: false,
            session_seed,
        }
    }

    /// `{player_id},{dilemma_id},{response},{timestamp}`, where the response
    /// is the chosen option index.
    pub fn log_line(&self) -> String {
        let r = &self.record;
        format!(
            "{},{},{},{}",
            r.player, r.dilemma_id, r.option_index, r.timestamp
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Entry {
    CreateTable { table: String },
    Response { table: String, row: StoredRow },
    MarkIncomplete { room_id: String, player: PlayerId },
    Vote { vote: Vote },
    Consensus { room_id: String, score: ConsensusScore },
    GroupTable { table: String, data: GroupTable },
}

/// Materialized view of a store at the time it was read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreContents {
    pub tables: BTreeSet<String>,
    pub rows: BTreeMap<String, Vec<StoredRow>>,
    pub votes: Vec<Vote>,
    pub consensus: BTreeMap<String, ConsensusScore>,
    pub group_tables: BTreeMap<String, GroupTable>,
}

impl StoreContents {
    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::CreateTable { table } => {
                self.rows.entry(table.clone()).or_default();
                self.tables.insert(table);
            }
            Entry::Response { table, row } => {
                self.tables.insert(table.clone());
                self.rows.entry(table).or_default().push(row);
            }
            Entry::MarkIncomplete { room_id, player } => {
                for row in self.rows.values_mut().flatten() {
                    if row.record.room_id == room_id && row.record.player == player {
                        row.incomplete = true;
                    }
                }
            }
            Entry::Vote { vote } => {
                self.tables.insert(VOTES_TABLE.into());
                self.votes.push(vote);
            }
            Entry::Consensus { room_id, score } => {
                self.tables.insert(CONSENSUS_TABLE.into());
                self.consensus.insert(room_id, score);
            }
            Entry::GroupTable { table, data } => {
                self.tables.insert(table.clone());
                self.group_tables.insert(table, data);
            }
        }
    }

    pub fn rows(&self, group: Group) -> &[StoredRow] {
        self.rows
            .get(answer_table(group))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The rows of one answer table in export form.
    pub fn answer_table_data(&self, group: Group) -> TableData {
        TableData {
            columns: EXPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows: self
                .rows(group)
                .iter()
                .map(|row| {
                    let r = &row.record;
                    vec![
                        r.player.to_string(),
                        r.dilemma_id.to_string(),
                        r.option_index.to_string(),
                        r.timestamp.clone(),
                        r.room_id.clone(),
                        r.category.label().to_string(),
                        r.attempt.to_string(),
                        row.incomplete.to_string(),
                    ]
                })
                .collect(),
        }
    }

    /// Latest vote per player for `room_id`.
    pub fn room_votes(&self, room_id: &str) -> BTreeMap<PlayerId, Vote> {
        self.votes
            .iter()
            .filter(|v| v.room_id == room_id)
            .map(|v| (v.player, v.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync every committed entry.
    #[default]
    Sync,
    /// Flush to the OS only; used by batch simulation.
    Flush,
}

#[derive(Debug)]
enum Backend {
    File(PathBuf),
    Memory(Mutex<Vec<Entry>>),
}

#[derive(Debug)]
pub struct ResponseStore {
    backend: Backend,
    writable: bool,
    durability: Durability,
}

impl ResponseStore {
    /// Opens (creating if needed) a writable file store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| unavailable(&path, e))?;
        Ok(Self {
            backend: Backend::File(path),
            writable: true,
            durability: Durability::Sync,
        })
    }

    /// Opens an existing file store for reading; every write fails.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        File::open(&path).map_err(|e| unavailable(&path, e))?;
        Ok(Self {
            backend: Backend::File(path),
            writable: false,
            durability: Durability::Sync,
        })
    }

    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(Mutex::new(Vec::new())),
            writable: true,
            durability: Durability::Sync,
        }
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File(p) => Some(p),
            Backend::Memory(_) => None,
        }
    }

    fn commit(&self, entry: Entry) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::StoreUnavailable("store is read-only".into()));
        }
        match &self.backend {
            Backend::Memory(entries) => {
                entries.lock().expect("store lock").push(entry);
                Ok(())
            }
            Backend::File(path) => {
                let mut line = serde_json::to_vec(&entry)
                    .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?;
                line.push(b'\n');
                let mut file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(path)
                    .map_err(|e| unavailable(path, e))?;
                drop_uncommitted_tail(&mut file).map_err(|e| unavailable(path, e))?;
                file.seek(SeekFrom::End(0))
                    .and_then(|_| file.write_all(&line))
                    .and_then(|_| match self.durability {
                        Durability::Sync => file.sync_data(),
                        Durability::Flush => file.flush(),
                    })
                    .map_err(|e| unavailable(path, e))
            }
        }
    }

    fn entries(&self) -> Result<Vec<Entry>, StoreError> {
        match &self.backend {
            Backend::Memory(entries) => Ok(entries.lock().expect("store lock").clone()),
            Backend::File(path) => {
                let mut text = String::new();
                File::open(path)
                    .and_then(|mut f| f.read_to_string(&mut text))
                    .map_err(|e| unavailable(path, e))?;
                let committed = match text.rfind('\n') {
                    Some(end) => &text[..end],
                    None => "",
                };
                committed
                    .split('\n')
                    .enumerate()
                    .filter(|(_, l)| !l.is_empty())
                    .map(|(i, l)| {
                        serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                            line: i + 1,
                            reason: e.to_string(),
                        })
                    })
                    .collect()
            }
        }
    }

    pub fn contents(&self) -> Result<StoreContents, StoreError> {
        let mut contents = StoreContents::default();
        for entry in self.entries()? {
            contents.apply(entry);
        }
        Ok(contents)
    }

    pub fn table_names(&self) -> Result<BTreeSet<String>, StoreError> {
        Ok(self.contents()?.tables)
    }

    /// Creates both answer tables if missing.
    pub fn ensure_tables(&self) -> Result<(), StoreError> {
        let existing = self.table_names()?;
        for (_, table) in ANSWER_TABLES {
            if !existing.contains(table) {
                self.commit(Entry::CreateTable {
                    table: table.to_string(),
                })?;
            }
        }
        Ok(())
    }

    /// Appends one answer to the table of its dilemma's group. The table
    /// is expected to exist already (see [`ensure_tables`](Self::ensure_tables)).
    pub fn append_response(&self, row: &StoredRow) -> Result<(), StoreError> {
        self.commit(Entry::Response {
            table: answer_table(row.record.category.group()).to_string(),
            row: row.clone(),
        })
    }

    /// Flags every row of `player` in `room_id` committed so far as incomplete.
    pub fn mark_incomplete(&self, room_id: &str, player: PlayerId) -> Result<(), StoreError> {
        self.commit(Entry::MarkIncomplete {
            room_id: room_id.to_string(),
            player,
        })
    }

    pub fn append_vote(&self, vote: &Vote) -> Result<(), StoreError> {
        self.commit(Entry::Vote { vote: vote.clone() })
    }

    pub fn append_consensus(&self, room_id: &str, score: ConsensusScore) -> Result<(), StoreError> {
        self.commit(Entry::Consensus {
            room_id: room_id.to_string(),
            score,
        })
    }

    pub fn write_group_table(&self, name: &str, table: &GroupTable) -> Result<(), StoreError> {
        self.commit(Entry::GroupTable {
            table: name.to_string(),
            data: table.clone(),
        })
    }

    pub fn read_group_table(&self, name: &str) -> Result<Option<GroupTable>, StoreError> {
        Ok(self.contents()?.group_tables.remove(name))
    }

    pub fn rows(&self, group: Group) -> Result<Vec<StoredRow>, StoreError> {
        Ok(self.contents()?.rows(group).to_vec())
    }

    /// Researcher-facing read of a closed room's vote tally.
    pub fn consensus(&self, room_id: &str) -> Result<Option<ConsensusScore>, StoreError> {
        Ok(self.contents()?.consensus.remove(room_id))
    }
}

fn unavailable(path: &Path, e: io::Error) -> StoreError {
    StoreError::StoreUnavailable(format!("{}: {e}", path.display()))
}

fn drop_uncommitted_tail(file: &mut File) -> io::Result<()> {
    let len = file.seek(SeekFrom::End(0))?;
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8];
    file.seek(SeekFrom::End(-1))?;
    file.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(());
    }
    let mut bytes = Vec::with_capacity(len as usize);
    file.seek(SeekFrom::Start(0))?;
    file.read_to_end(&mut bytes)?;
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    file.set_len(keep as u64)
}

/// Column names plus text cells; the unit of export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableData {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportName {
    pub table: u8,
    pub n: Option<u32>,
    pub timestr: String,
}

impl ExportName {
    pub fn new(table: u8, n: Option<u32>, now_ms: u64) -> Result<Self, StoreError> {
        if !(1..=2).contains(&table) {
            return Err(StoreError::BadTable(table));
        }
        Ok(Self {
            table,
            n,
            timestr: format_timestr(now_ms),
        })
    }

    pub fn stem(&self) -> String {
        match self.n {
            Some(n) => format!("Db1Table{}_{}_{}", self.table, n, self.timestr),
            None => format!("Db1Table{}_{}", self.table, self.timestr),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ExportFile {
    format: String,
    tables: BTreeMap<String, TableData>,
}

/// Writes `{stem}.json` holding one table named `answer`, and `{stem}.csv`
/// with the same content. Returns the path of the `.json` file.
pub fn export_answers(
    dir: impl AsRef<Path>,
    data: &TableData,
    table: u8,
    n: Option<u32>,
    clock: &dyn Clock,
) -> Result<PathBuf, StoreError> {
    let dir = dir.as_ref();
    let stem = ExportName::new(table, n, clock.now_ms())?.stem();
    fs::create_dir_all(dir)?;

    let mut candidate = stem.clone();
    let mut k = 0;
    let json_path = loop {
        let path = dir.join(format!("{candidate}.json"));
        if !path.exists() && !dir.join(format!("{candidate}.csv")).exists() {
            break path;
        }
        k += 1;
        candidate = format!("{stem}-{k}");
    };

    let file = ExportFile {
        format: EXPORT_FORMAT.into(),
        tables: [(EXPORT_TABLE.to_string(), data.clone())].into(),
    };
    let body = serde_json::to_vec_pretty(&file).map_err(|e| StoreError::Format(e.to_string()))?;
    fs::write(&json_path, body)?;
    write_csv(json_path.with_extension("csv"), data)?;
    Ok(json_path)
}

/// Reads back the `answer` table of an export file.
pub fn import_export(path: impl AsRef<Path>) -> Result<TableData, StoreError> {
    let text = fs::read_to_string(path)?;
    let mut file: ExportFile =
        serde_json::from_str(&text).map_err(|e| StoreError::Format(e.to_string()))?;
    if file.format != EXPORT_FORMAT {
        return Err(StoreError::Format(format!("unknown format `{}`", file.format)));
    }
    file.tables
        .remove(EXPORT_TABLE)
        .ok_or_else(|| StoreError::Format("missing `answer` table".into()))
}

/// CSV with a header of column names, UTF-8, LF line endings.
pub fn write_csv(path: impl AsRef<Path>, data: &TableData) -> Result<(), StoreError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_io)?;
    writer.write_record(&data.columns).map_err(csv_io)?;
    for row in &data.rows {
        writer.write_record(row).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<TableData, StoreError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_io)?;
    let columns = reader
        .headers()
        .map_err(csv_io)?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(csv_io)?;
    Ok(TableData { columns, rows })
}

fn csv_io(e: csv::Error) -> StoreError {
    StoreError::IoError(io::Error::other(e))
}
