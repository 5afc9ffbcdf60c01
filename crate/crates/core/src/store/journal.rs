//! Journal persistence.
//!
//! A journal is a text file of `\n`-terminated lines. Locally owned rows are
//! written as plain insert statements; shared rows are written as
//! `$<id>@<HEX>` where `<id>` is the pending-row id the row was received under
//! and `<HEX>` is the uppercase hex of `encrypt_row(serialize_row(row), key)`.
//!
//! Table definitions live in a sidecar file (`<journal>.tables`) holding one
//! `CREATE TABLE` statement per line, so the journal itself contains nothing
//! but row lines.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::statement::{self, format_insert};
use super::{deserialize_row, serialize_row, Integration, Store, StoreError};
use crate::crypto::{decrypt_row, encrypt_row, from_hex, to_hex, RowKey};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptLine {
    Plain(String),
    Shared { id: u64, ciphertext: Vec<u8> },
}

impl ScriptLine {
    pub fn parse(line: &str) -> Result<ScriptLine, String> {
        let Some(rest) = line.strip_prefix('$') else {
            return Ok(ScriptLine::Plain(line.to_string()));
        };
        let (id, hex) = rest
            .split_once('@')
            .ok_or_else(|| "shared line without '@'".to_string())?;
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("invalid shared id {id:?}"));
        }
        let id = id.parse::<u64>().map_err(|e| e.to_string())?;
        if hex.is_empty() {
            return Err("empty ciphertext".into());
        }
        let ciphertext = from_hex(hex).map_err(|e| e.to_string())?;
        Ok(ScriptLine::Shared { id, ciphertext })
    }
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptLine::Plain(text) => f.write_str(text),
            ScriptLine::Shared { id, ciphertext } => write!(f, "${id}@{}", to_hex(ciphertext)),
        }
    }
}

/// Outcome of asking for the row key of a shared line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyLookup {
    Found(RowKey),
    /// The synchronizer affirmatively holds no key (revoked or never granted).
    Revoked,
    /// The synchronizer could not be reached.
    Unavailable,
    /// A key record was returned but could not be opened.
    Invalid(String),
}

pub trait KeyResolver {
    fn resolve(&mut self, id: u64) -> KeyLookup;

    /// Resolves several ids at once. Implementations backed by a remote
    /// service should override this to pipeline requests.
    fn resolve_all(&mut self, ids: &[u64]) -> Vec<KeyLookup> {
        ids.iter().map(|&id| self.resolve(id)).collect()
    }
}

impl<F: FnMut(u64) -> KeyLookup> KeyResolver for F {
    fn resolve(&mut self, id: u64) -> KeyLookup {
        self(id)
    }
}

/// What to do with a shared line whose key is affirmatively absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RevokedPolicy {
    /// Drop the line permanently.
    #[default]
    Delete,
    /// Keep the line encrypted in case access is restored.
    Retain,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub on_revoked: RevokedPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub plain_rows: usize,
    pub shared_rows: usize,
    /// Lines whose key was affirmatively absent.
    pub revoked: Vec<u64>,
    /// Lines kept encrypted because the synchronizer was unreachable.
    pub unavailable: Vec<u64>,
    /// Lines kept encrypted because they failed authentication or parsing.
    pub integrity_failures: Vec<u64>,
    /// Lines kept encrypted because their primary key belongs to an owned row.
    pub conflicts: Vec<u64>,
    /// Older versions of a shared row dropped in favour of a newer id.
    pub superseded: Vec<u64>,
    pub duplicate_lines: usize,
    /// (1-based line number, message)
    pub parse_errors: Vec<(usize, String)>,
    pub decrypts: usize,
    pub key_requests: usize,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.revoked.is_empty()
            && self.unavailable.is_empty()
            && self.integrity_failures.is_empty()
            && self.conflicts.is_empty()
            && self.parse_errors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaveReport {
    pub plain_lines: usize,
    pub shared_lines: usize,
    pub sealed_lines: usize,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O: {0}")]
    Io(#[from] io::Error),
    #[error("no key available for shared row {0}")]
    KeyUnavailable(u64),
    #[error("table catalog line {line}: {reason}")]
    Catalog { line: usize, reason: String },
}

pub fn schema_path(journal: &Path) -> PathBuf {
    fsutil::sibling(journal, ".tables")
}

/// Writes `store` to `path`. Every decrypted shared row is re-encrypted under
/// the key supplied by `resolver`; if any key is missing nothing is written.
pub fn save_script(
    store: &Store,
    path: &Path,
    resolver: &mut dyn KeyResolver,
) -> Result<SaveReport, JournalError> {
    let shared_ids: Vec<u64> = store.shared_ids().collect();
    let mut keys: HashMap<u64, RowKey> = HashMap::with_capacity(shared_ids.len());
    if !shared_ids.is_empty() {
        for (id, lookup) in shared_ids.iter().zip(resolver.resolve_all(&shared_ids)) {
            match lookup {
                KeyLookup::Found(key) => {
                    keys.insert(*id, key);
                }
                _ => return Err(JournalError::KeyUnavailable(*id)),
            }
        }
    }

    let mut report = SaveReport::default();
    let mut catalog = String::new();
    let mut out = String::with_capacity(store.row_count() * 64);
    for table in store.tables() {
        catalog.push_str(&statement::format_create(table.schema()));
        catalog.push('\n');
        for row in table.rows() {
            match row.shared_id {
                None => {
                    out.push_str(&format_insert(row));
                    report.plain_lines += 1;
                }
                Some(id) => {
                    let sealed = encrypt_row(&serialize_row(row), &keys[&id]);
                    push_shared(&mut out, id, &sealed);
                    report.shared_lines += 1;
                }
            }
            out.push('\n');
        }
    }
    for (id, ciphertext) in store.sealed_lines() {
        push_shared(&mut out, id, ciphertext);
        out.push('\n');
        report.sealed_lines += 1;
    }

    fsutil::write_atomic(&schema_path(path), catalog.as_bytes())?;
    fsutil::write_atomic(path, out.as_bytes())?;
    Ok(report)
}

fn push_shared(out: &mut String, id: u64, ciphertext: &[u8]) {
    use fmt::Write as _;
    let _ = write!(out, "${id}@");
    out.push_str(&to_hex(ciphertext));
}

/// Appends received shared lines to an existing journal and syncs the file.
pub fn append_shared_lines(path: &Path, lines: &[(u64, &[u8])]) -> Result<(), JournalError> {
    if lines.is_empty() {
        return Ok(());
    }
    let mut out = String::new();
    for (id, ciphertext) in lines {
        push_shared(&mut out, *id, ciphertext);
        out.push('\n');
    }
    fsutil::append_synced(path, out.as_bytes())?;
    Ok(())
}

fn read_optional(path: &Path) -> Result<Option<String>, JournalError> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(String::from_utf8_lossy(&bytes).into_owned())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Reads a journal. Plain lines are loaded directly; each distinct shared line
/// costs one key request and, when a key is found, exactly one decryption.
/// A missing journal yields an empty store.
pub fn load_script(
    path: &Path,
    resolver: &mut dyn KeyResolver,
    options: &LoadOptions,
) -> Result<(Store, LoadReport), JournalError> {
    let mut store = Store::new();
    let mut report = LoadReport::default();

    if let Some(catalog) = read_optional(&schema_path(path))? {
        for (i, line) in catalog.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let schema = statement::parse_create(line).map_err(|e| JournalError::Catalog {
                line: i + 1,
                reason: e.to_string(),
            })?;
            store.add_table(schema).map_err(|e| JournalError::Catalog {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
    }

    let text = read_optional(path)?.unwrap_or_default();
    let mut shared: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for (i, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        match ScriptLine::parse(line) {
            Ok(ScriptLine::Plain(stmt)) => match load_plain(&mut store, &stmt) {
                Ok(()) => report.plain_rows += 1,
                Err(e) => report.parse_errors.push((i + 1, e)),
            },
            Ok(ScriptLine::Shared { id, ciphertext }) => {
                if shared.contains_key(&id) {
                    report.duplicate_lines += 1;
                } else {
                    shared.insert(id, ciphertext);
                }
            }
            Err(e) => report.parse_errors.push((i + 1, e)),
        }
    }

    let ids: Vec<u64> = shared.keys().copied().collect();
    report.key_requests = ids.len();
    let lookups = if ids.is_empty() {
        Vec::new()
    } else {
        resolver.resolve_all(&ids)
    };
    for ((id, ciphertext), lookup) in shared.into_iter().zip(lookups) {
        match lookup {
            KeyLookup::Found(key) => {
                report.decrypts += 1;
                let row = decrypt_row(&ciphertext, &key)
                    .map_err(|e| e.to_string())
                    .and_then(|plain| deserialize_row(&plain).map_err(|e| e.to_string()));
                let mut row = match row {
                    Ok(row) => row,
                    Err(_) => {
                        report.integrity_failures.push(id);
                        store.insert_sealed(id, ciphertext);
                        continue;
                    }
                };
                row.shared_id = Some(id);
                match store.integrate_shared(row) {
                    Ok(Integration::Inserted) => report.shared_rows += 1,
                    Ok(Integration::Superseded(old)) => {
                        report.superseded.push(old);
                        report.shared_rows += 1;
                    }
                    Ok(Integration::Stale) => report.superseded.push(id),
                    Ok(Integration::Conflict) => {
                        report.conflicts.push(id);
                        store.insert_sealed(id, ciphertext);
                    }
                    Err(_) => {
                        report.integrity_failures.push(id);
                        store.insert_sealed(id, ciphertext);
                    }
                }
            }
            KeyLookup::Revoked => {
                report.revoked.push(id);
                if options.on_revoked == RevokedPolicy::Retain {
                    store.insert_sealed(id, ciphertext);
                }
            }
            KeyLookup::Unavailable => {
                report.unavailable.push(id);
                store.insert_sealed(id, ciphertext);
            }
            KeyLookup::Invalid(_) => {
                report.integrity_failures.push(id);
                store.insert_sealed(id, ciphertext);
            }
        }
    }
    // A superseded id may have been counted before its replacement arrived.
    report.shared_rows = store.shared_ids().count();
    Ok((store, report))
}

fn load_plain(store: &mut Store, stmt: &str) -> Result<(), String> {
    let row = statement::parse_insert(stmt).map_err(|e| e.to_string())?;
    if store.table(&row.table).is_none() {
        let columns: Vec<&str> = row.fields.iter().map(|(c, _)| c.as_str()).collect();
        let pk = columns.first().copied().unwrap_or_default();
        store
            .create_table(&row.table, &columns, pk)
            .map_err(|e: StoreError| e.to_string())?;
    }
    store.upsert_row(row).map(|_| ()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_row_key;
    use crate::store::Row;

    #[test]
    fn shared_line_syntax() {
        let line = ScriptLine::Shared {
            id: 27,
            ciphertext: vec![0x5d, 0xaa, 0xae],
        };
        assert_eq!(line.to_string(), "$27@5DAAAE");
        assert_eq!(ScriptLine::parse("$27@5DAAAE").unwrap(), line);
        for bad in ["$@AB", "$x@AB", "$27AB", "$27@", "$27@ab", "$27@ABC", "$ 27@AB"] {
            assert!(ScriptLine::parse(bad).is_err(), "{bad}");
        }
        assert_eq!(
            ScriptLine::parse("INSERT INTO t(a) VALUES(1);").unwrap(),
            ScriptLine::Plain("INSERT INTO t(a) VALUES(1);".into())
        );
    }

    #[test]
    fn empty_store_saves_empty_journal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.script");
        let mut none = |_id: u64| KeyLookup::Unavailable;
        save_script(&Store::new(), &path, &mut none).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");
        let (store, report) = load_script(&path, &mut none, &LoadOptions::default()).unwrap();
        assert_eq!(store, Store::new());
        assert_eq!(report, LoadReport::default());
    }

    #[test]
    fn missing_key_aborts_save_and_keeps_old_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.script");
        fs::write(&path, "previous\n").unwrap();
        let mut store = Store::new();
        store.create_table("students", &["id", "name"], "id").unwrap();
        let mut row = Row::new("students").with("id", 1).with("name", "x");
        row.shared_id = Some(9);
        store.integrate_shared(row).unwrap();
        let mut none = |_id: u64| KeyLookup::Unavailable;
        assert!(matches!(
            save_script(&store, &path, &mut none),
            Err(JournalError::KeyUnavailable(9))
        ));
        assert_eq!(fs::read_to_string(&path).unwrap(), "previous\n");
    }

    #[test]
    fn malformed_lines_are_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.script");
        fs::write(
            &path,
            "INSERT INTO students(id,name) VALUES(12,'Alice');\ngarbage\n$1@XYZ\nINSERT INTO students(id,name) VALUES(31,'Bob');\n",
        )
        .unwrap();
        let mut none = |_id: u64| KeyLookup::Unavailable;
        let (store, report) = load_script(&path, &mut none, &LoadOptions::default()).unwrap();
        assert_eq!(store.row_count(), 2);
        assert_eq!(report.plain_rows, 2);
        assert_eq!(
            report.parse_errors.iter().map(|(l, _)| *l).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn duplicate_shared_lines_load_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.script");
        let key = generate_row_key();
        let row = Row::new("students").with("id", 40).with("name", "Dan");
        let sealed = encrypt_row(&serialize_row(&row), &key);
        append_shared_lines(&path, &[(27, &sealed)]).unwrap();
        append_shared_lines(&path, &[(27, &sealed)]).unwrap();
        let mut calls = 0;
        let mut resolver = |_id: u64| {
            calls += 1;
            KeyLookup::Found(key.clone())
        };
        let (store, report) = load_script(&path, &mut resolver, &LoadOptions::default()).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(report.duplicate_lines, 1);
        assert_eq!(report.decrypts, 1);
        assert_eq!(store.shared_row(27).unwrap().get("name"), Some(&"Dan".into()));
    }

    #[test]
    fn stale_temp_file_does_not_affect_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.script");
        let mut store = Store::new();
        store.create_table("students", &["id", "name"], "id").unwrap();
        store
            .upsert_row(Row::new("students").with("id", 12).with("name", "Alice"))
            .unwrap();
        let mut none = |_id: u64| KeyLookup::Unavailable;
        save_script(&store, &path, &mut none).unwrap();
        // A save that died before its rename leaves only a partial temp file.
        fs::write(fsutil::sibling(&path, ".tmp"), "INSERT INTO students(id,na").unwrap();
        let (loaded, report) = load_script(&path, &mut none, &LoadOptions::default()).unwrap();
        assert_eq!(loaded, store);
        assert!(report.is_clean());
    }
}
