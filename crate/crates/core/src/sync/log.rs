//! Append-only operation log backing the synchronizer state.
//!
//! One JSON record per line. On open the log is replayed in order; a trailing
//! partial line (a write cut short by a crash) is discarded and truncated away.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::UserRecord;
use crate::wire::{PendingRow, WrappedKeyRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogRecord {
    UserRegistered { user: UserRecord },
    RowStored { row: PendingRow },
    RowDelivered { id: u64 },
    KeyStored { record: WrappedKeyRecord },
    KeyDeleted { id_row: u64, receiver: String },
}

pub struct OpLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl OpLog {
    /// Opens (creating if needed) the log at `path` and returns it with every
    /// complete record it holds.
    pub fn open(path: &Path) -> io::Result<(OpLog, Vec<LogRecord>)> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut records = Vec::new();
        let mut good_len = 0usize;
        let mut start = 0usize;
        while let Some(nl) = bytes[start..].iter().position(|&b| b == b'\n') {
            let line = &bytes[start..start + nl];
            if !line.is_empty() {
                let record: LogRecord = serde_json::from_slice(line).map_err(|e| {
                    io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("{}: corrupt record at byte {start}: {e}", path.display()),
                    )
                })?;
                records.push(record);
            }
            start += nl + 1;
            good_len = start;
        }
        if good_len < bytes.len() {
            file.set_len(good_len as u64)?;
            file.sync_all()?;
        }
        Ok((
            OpLog {
                path: path.to_path_buf(),
                writer: BufWriter::new(file),
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and hands it to the OS before returning.
    pub fn append(&mut self, record: &LogRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.writer.flush()?;
        self.writer.get_ref().sync_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.log");
        {
            let (mut log, records) = OpLog::open(&path).unwrap();
            assert!(records.is_empty());
            log.append(&LogRecord::RowDelivered { id: 1 }).unwrap();
            log.append(&LogRecord::RowDelivered { id: 2 }).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"op":"row_deliv"#).unwrap();
        drop(f);

        let (mut log, records) = OpLog::open(&path).unwrap();
        assert_eq!(
            records,
            vec![LogRecord::RowDelivered { id: 1 }, LogRecord::RowDelivered { id: 2 }]
        );
        log.append(&LogRecord::RowDelivered { id: 3 }).unwrap();
        drop(log);
        let (_, records) = OpLog::open(&path).unwrap();
        assert_eq!(records.len(), 3);
    }

    #[test]
    fn corrupt_middle_record_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.log");
        std::fs::write(&path, "garbage\n{\"op\":\"row_delivered\",\"id\":1}\n").unwrap();
        assert!(OpLog::open(&path).is_err());
    }
}
