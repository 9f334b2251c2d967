//! Per-project directory with a write-ahead journal.
//!
//! A commit appends one journal line holding the full new content of every
//! file it changes and syncs it; that append is the commit point. The files
//! are then replaced one by one (write to a temporary name, rename) and the
//! `CHECKPOINT` file records the last applied sequence number. Opening a
//! store drops a torn journal tail and re-applies committed entries past the
//! checkpoint, so a crash anywhere leaves the last committed state.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CHECKPOINT_FILE: &str = "CHECKPOINT";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("invalid store path {0:?}")]
    BadPath(String),
    #[error("injected crash at commit {commit} ({phase:?})")]
    InjectedCrash { commit: u64, phase: CrashPhase },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "encoding", content = "data", rename_all = "snake_case")]
pub enum Content {
    Text(String),
    Hex(String),
}

impl Content {
    pub fn bytes(bytes: &[u8]) -> Self {
        Content::Hex(hex::encode(bytes))
    }

    fn decode(&self) -> Result<Vec<u8>, String> {
        match self {
            Content::Text(s) => Ok(s.as_bytes().to_vec()),
            Content::Hex(h) => hex::decode(h).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileWrite {
    pub path: String,
    pub content: Content,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub op: String,
    pub writes: Vec<FileWrite>,
}

/// Where an injected crash stops a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrashPhase {
    BeforeJournal,
    /// Half of the journal line is on disk.
    TornJournal,
    AfterJournal,
    /// The first file of the commit was replaced, the rest were not.
    MidApply,
    BeforeCheckpoint,
}

impl CrashPhase {
    pub const ALL: [CrashPhase; 5] = [
        CrashPhase::BeforeJournal,
        CrashPhase::TornJournal,
        CrashPhase::AfterJournal,
        CrashPhase::MidApply,
        CrashPhase::BeforeCheckpoint,
    ];

    /// Whether the interrupted commit survives recovery.
    pub fn committed(self) -> bool {
        matches!(self, CrashPhase::AfterJournal | CrashPhase::MidApply | CrashPhase::BeforeCheckpoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashPoint {
    /// Sequence number of the commit to interrupt.
    pub commit: u64,
    pub phase: CrashPhase,
}

#[derive(Debug)]
pub struct ProjectStore {
    dir: PathBuf,
    next_seq: u64,
    crash: Option<CrashPoint>,
}

fn check_relative(path: &str) -> Result<(), StoreError> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, std::path::Component::Normal(_)))
        && path != JOURNAL_FILE
        && path != CHECKPOINT_FILE;
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadPath(path.to_string()))
    }
}

fn sync_dir(dir: &Path) {
    // best effort: directory fsync is not available everywhere
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Atomically replaces `path` with `bytes`.
pub fn replace_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))?;
    if let Some(parent) = path.parent() {
        sync_dir(parent);
    }
    Ok(())
}

impl ProjectStore {
    /// Opens (creating if needed) and recovers a project directory.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let entries = recover_journal(dir)?;
        let checkpoint = read_checkpoint(dir)?;
        let mut last = checkpoint;
        for e in entries.iter().filter(|e| e.seq > checkpoint) {
            apply(dir, e, None)?;
            last = e.seq;
        }
        if last != checkpoint {
            replace_file(&dir.join(CHECKPOINT_FILE), format!("{last}\n").as_bytes())?;
        }
        let next_seq = entries.last().map_or(1, |e| e.seq + 1);
        Ok(Self { dir: dir.to_path_buf(), next_seq, crash: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn inject_crash(&mut self, crash: Option<CrashPoint>) {
        self.crash = crash;
    }

    fn crash_at(&self, seq: u64, phase: CrashPhase) -> Result<(), StoreError> {
        match self.crash {
            Some(c) if c.commit == seq && c.phase == phase => Err(StoreError::InjectedCrash { commit: seq, phase }),
            _ => Ok(()),
        }
    }

    /// Journals and applies one atomic change. Returns the sequence number.
    pub fn commit(&mut self, op: &str, writes: Vec<FileWrite>) -> Result<u64, StoreError> {
        for w in &writes {
            check_relative(&w.path)?;
        }
        let seq = self.next_seq;
        let entry = JournalEntry { seq, op: op.to_string(), writes };
        let line = serde_json::to_string(&entry).expect("journal entry serializes") + "\n";
        self.crash_at(seq, CrashPhase::BeforeJournal)?;
        let path = self.dir.join(JOURNAL_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        if let Err(crash) = self.crash_at(seq, CrashPhase::TornJournal) {
            f.write_all(&line.as_bytes()[..line.len() / 2]).map_err(io(&path))?;
            f.sync_all().map_err(io(&path))?;
            return Err(crash);
        }
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_all().map_err(io(&path))?;
        self.next_seq += 1;
        self.crash_at(seq, CrashPhase::AfterJournal)?;
        apply(&self.dir, &entry, self.crash.filter(|c| c.commit == seq && c.phase == CrashPhase::MidApply))?;
        self.crash_at(seq, CrashPhase::BeforeCheckpoint)?;
        replace_file(&self.dir.join(CHECKPOINT_FILE), format!("{seq}\n").as_bytes())?;
        Ok(seq)
    }

    pub fn read(&self, path: &str) -> Result<Option<Vec<u8>>, StoreError> {
        check_relative(path)?;
        let full = self.dir.join(path);
        match fs::read(&full) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path: full, source: e }),
        }
    }

    pub fn journal(&self) -> Result<Vec<JournalEntry>, StoreError> {
        read_journal(&self.dir).map(|(entries, _)| entries)
    }
}

fn apply(dir: &Path, entry: &JournalEntry, crash: Option<CrashPoint>) -> Result<(), StoreError> {
    for (i, w) in entry.writes.iter().enumerate() {
        if i == 1 {
            if let Some(c) = crash {
                return Err(StoreError::InjectedCrash { commit: c.commit, phase: c.phase });
            }
        }
        let bytes = w.content.decode().map_err(|m| StoreError::Journal { line: entry.seq as usize, message: m })?;
        replace_file(&dir.join(&w.path), &bytes)?;
    }
    match crash {
        Some(c) => Err(StoreError::InjectedCrash { commit: c.commit, phase: c.phase }),
        None => Ok(()),
    }
}

fn read_checkpoint(dir: &Path) -> Result<u64, StoreError> {
    let path = dir.join(CHECKPOINT_FILE);
    match fs::read_to_string(&path) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| StoreError::Journal { line: 0, message: format!("bad checkpoint {:?}", s.trim()) }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(StoreError::Io { path, source: e }),
    }
}

/// Complete entries and the byte length they occupy. An unterminated or
/// unparsable final line is a torn write; anything wrong before it is
/// corruption.
fn read_journal(dir: &Path) -> Result<(Vec<JournalEntry>, usize), StoreError> {
    let path = dir.join(JOURNAL_FILE);
    let body = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(StoreError::Io { path, source: e }),
    };
    let mut entries: Vec<JournalEntry> = Vec::new();
    let mut good = 0;
    let mut start = 0;
    let mut line_no = 0;
    while start < body.len() {
        line_no += 1;
        let Some(rel) = body[start..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let end = start + rel;
        let parsed = std::str::from_utf8(&body[start..end])
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<JournalEntry>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(e) => {
                let expected = entries.last().map_or(1, |p| p.seq + 1);
                if e.seq != expected {
                    return Err(StoreError::Journal {
                        line: line_no,
                        message: format!("sequence {} follows {}", e.seq, expected - 1),
                    });
                }
                entries.push(e);
                good = end + 1;
            }
            Err(message) if end + 1 == body.len() => {
                log::warn!("discarding unreadable final journal line: {message}");
                break;
            }
            Err(message) => return Err(StoreError::Journal { line: line_no, message }),
        }
        start = end + 1;
    }
    Ok((entries, good))
}

fn recover_journal(dir: &Path) -> Result<Vec<JournalEntry>, StoreError> {
    let (entries, good) = read_journal(dir)?;
    let path = dir.join(JOURNAL_FILE);
    if let Ok(meta) = fs::metadata(&path) {
        if meta.len() as usize != good {
            log::warn!("truncating torn journal tail of {} bytes", meta.len() as usize - good);
            let f = OpenOptions::new().write(true).open(&path).map_err(io(&path))?;
            f.set_len(good as u64).map_err(io(&path))?;
            f.sync_all().map_err(io(&path))?;
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(path: &str, s: &str) -> FileWrite {
        FileWrite { path: path.into(), content: Content::Text(s.into()) }
    }

    #[test]
    fn commit_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ProjectStore::open(dir.path()).unwrap();
        assert_eq!(s.commit("a", vec![text("x.txt", "1"), FileWrite { path: "m/b.bin".into(), content: Content::bytes(&[0, 255]) }]).unwrap(), 1);
        assert_eq!(s.commit("b", vec![text("x.txt", "2")]).unwrap(), 2);
        let s = ProjectStore::open(dir.path()).unwrap();
        assert_eq!(s.next_seq(), 3);
        assert_eq!(s.read("x.txt").unwrap().unwrap(), b"2");
        assert_eq!(s.read("m/b.bin").unwrap().unwrap(), vec![0, 255]);
        assert!(s.read("missing").unwrap().is_none());
        assert!(matches!(s.read("../etc"), Err(StoreError::BadPath(_))));
    }

    #[test]
    fn crash_phases_recover_to_last_commit() {
        for phase in CrashPhase::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut s = ProjectStore::open(dir.path()).unwrap();
            s.commit("a", vec![text("x", "old"), text("y", "old")]).unwrap();
            s.inject_crash(Some(CrashPoint { commit: 2, phase }));
            let err = s.commit("b", vec![text("x", "new"), text("y", "new")]).unwrap_err();
            assert!(matches!(err, StoreError::InjectedCrash { .. }));
            let s = ProjectStore::open(dir.path()).unwrap();
            let want: &[u8] = if phase.committed() { b"new" } else { b"old" };
            assert_eq!(s.read("x").unwrap().unwrap(), want, "{phase:?}");
            assert_eq!(s.read("y").unwrap().unwrap(), want, "{phase:?}");
            let mut s = s;
            let seq = s.commit("c", vec![text("z", "1")]).unwrap();
            assert_eq!(seq, if phase.committed() { 3 } else { 2 });
            assert_eq!(ProjectStore::open(dir.path()).unwrap().journal().unwrap().len() as u64, seq);
        }
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ProjectStore::open(dir.path()).unwrap();
        s.commit("a", vec![text("x", "1")]).unwrap();
        let path = dir.path().join(JOURNAL_FILE);
        let mut body = fs::read_to_string(&path).unwrap();
        body.insert_str(0, "garbage\n");
        fs::write(&path, body).unwrap();
        assert!(matches!(ProjectStore::open(dir.path()), Err(StoreError::Journal { line: 1, .. })));
    }
}
