//! Minimal in-memory table store.
//!
//! Tables hold rows keyed by primary key. A row either belongs to the local
//! user (`shared_id == None`) or was received from another owner, in which
//! case `shared_id` holds the synchronizer's pending-row id (the implicit
//! `id_pending_row_received` column). Shared rows that have not been decrypted
//! are kept as sealed ciphertext until a key becomes available.

pub mod journal;
pub mod statement;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use journal::{
    append_shared_lines, load_script, save_script, schema_path, KeyLookup, KeyResolver, LoadOptions,
    LoadReport, RevokedPolicy, SaveReport, ScriptLine,
};

/// Name of the provenance column every table carries implicitly.
pub const PROVENANCE_COLUMN: &str = "id_pending_row_received";

/// Current version byte of [`serialize_row`] output.
pub const SERIALIZED_ROW_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Int(i64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl Value {
    /// Parses a command-line literal: integers become `Int`, `NULL` becomes
    /// `Null`, anything else is text.
    pub fn parse_loose(text: &str) -> Value {
        if text == "NULL" {
            Value::Null
        } else if let Ok(i) = text.parse::<i64>() {
            Value::Int(i)
        } else {
            Value::Text(text.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub table: String,
    pub fields: Vec<(String, Value)>,
    pub shared_id: Option<u64>,
}

impl Row {
    pub fn new(table: impl Into<String>) -> Self {
        Row {
            table: table.into(),
            fields: Vec::new(),
            shared_id: None,
        }
    }

    pub fn with(mut self, column: impl Into<String>, value: impl Into<Value>) -> Self {
        self.fields.push((column.into(), value.into()));
        self
    }

    pub fn get(&self, column: &str) -> Option<&Value> {
        self.fields.iter().find(|(c, _)| c == column).map(|(_, v)| v)
    }

    pub fn is_owned(&self) -> bool {
        self.shared_id.is_none()
    }

    /// Replaces or appends a field value.
    pub fn set(&mut self, column: &str, value: Value) {
        match self.fields.iter_mut().find(|(c, _)| c == column) {
            Some((_, v)) => *v = value,
            None => self.fields.push((column.to_string(), value)),
        }
    }
}

/// Canonical encryption plaintext of a row: a version byte followed by the
/// row's insert statement. Provenance is not part of the plaintext.
pub fn serialize_row(row: &Row) -> Vec<u8> {
    let statement = statement::format_insert(row);
    let mut out = Vec::with_capacity(1 + statement.len());
    out.push(SERIALIZED_ROW_VERSION);
    out.extend_from_slice(statement.as_bytes());
    out
}

pub fn deserialize_row(bytes: &[u8]) -> Result<Row, StoreError> {
    let (version, rest) = bytes
        .split_first()
        .ok_or_else(|| StoreError::Corrupt("empty serialized row".into()))?;
    if *version != SERIALIZED_ROW_VERSION {
        return Err(StoreError::Corrupt(format!("unknown row version {version}")));
    }
    let text = std::str::from_utf8(rest).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    statement::parse_insert(text).map_err(|e| StoreError::Corrupt(e.to_string()))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("table {0} already exists")]
    DuplicateTable(String),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("corrupt serialized row: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<String>,
    pub primary_key: String,
}

impl TableSchema {
    pub fn has_column(&self, column: &str) -> bool {
        self.columns.iter().any(|c| c == column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    schema: TableSchema,
    rows: BTreeMap<Value, Row>,
}

impl Table {
    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    /// Rows in primary-key order.
    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn primary_key_of(&self, row: &Row) -> Result<Value, StoreError> {
        match row.get(&self.schema.primary_key) {
            Some(Value::Null) | None => Err(StoreError::Schema(format!(
                "row for {} lacks primary key {}",
                self.schema.name, self.schema.primary_key
            ))),
            Some(v) => Ok(v.clone()),
        }
    }

    fn check_columns(&self, row: &Row) -> Result<(), StoreError> {
        for (i, (column, _)) in row.fields.iter().enumerate() {
            if !self.schema.has_column(column) {
                return Err(StoreError::Schema(format!(
                    "table {} has no column {column}",
                    self.schema.name
                )));
            }
            if row.fields[..i].iter().any(|(c, _)| c == column) {
                return Err(StoreError::Schema(format!("column {column} given twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableHandle(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    All,
    Eq(String, Value),
}

/// Result of placing a decrypted shared row into the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Integration {
    Inserted,
    /// Replaced an older version received under the given id.
    Superseded(u64),
    /// A newer version of the same row is already present; nothing changed.
    Stale,
    /// The primary key belongs to a locally owned row; nothing changed.
    Conflict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Store {
    tables: Vec<Table>,
    by_name: HashMap<String, usize>,
    /// shared id → (table index, primary key) for decrypted shared rows.
    shared: BTreeMap<u64, (usize, Value)>,
    /// shared id → ciphertext for shared rows not decrypted in memory.
    sealed: BTreeMap<u64, Vec<u8>>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_table(&mut self, name: &str, columns: &[&str], primary_key: &str) -> Result<TableHandle, StoreError> {
        let schema = TableSchema {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            primary_key: primary_key.to_string(),
        };
        self.add_table(schema)
    }

    pub fn add_table(&mut self, schema: TableSchema) -> Result<TableHandle, StoreError> {
        if self.by_name.contains_key(&schema.name) {
            return Err(StoreError::DuplicateTable(schema.name));
        }
        if !statement::is_identifier(&schema.name) {
            return Err(StoreError::Schema(format!("invalid table name {:?}", schema.name)));
        }
        if schema.columns.is_empty() {
            return Err(StoreError::Schema("a table needs at least one column".into()));
        }
        for (i, column) in schema.columns.iter().enumerate() {
            if !statement::is_identifier(column) {
                return Err(StoreError::Schema(format!("invalid column name {column:?}")));
            }
            if column == PROVENANCE_COLUMN {
                return Err(StoreError::Schema(format!("{PROVENANCE_COLUMN} is implicit")));
            }
            if schema.columns[..i].contains(column) {
                return Err(StoreError::Schema(format!("duplicate column {column}")));
            }
        }
        if !schema.has_column(&schema.primary_key) {
            return Err(StoreError::Schema(format!(
                "primary key {} is not a column of {}",
                schema.primary_key, schema.name
            )));
        }
        let idx = self.tables.len();
        self.by_name.insert(schema.name.clone(), idx);
        self.tables.push(Table {
            schema,
            rows: BTreeMap::new(),
        });
        Ok(TableHandle(idx))
    }

    /// Tables in creation order.
    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.iter()
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.by_name.get(name).map(|&i| &self.tables[i])
    }

    pub fn handle(&self, name: &str) -> Option<TableHandle> {
        self.by_name.get(name).map(|&i| TableHandle(i))
    }

    pub fn table_by_handle(&self, handle: TableHandle) -> &Table {
        &self.tables[handle.0]
    }

    fn table_index(&self, name: &str) -> Result<usize, StoreError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| StoreError::UnknownTable(name.to_string()))
    }

    /// Inserts `row`, replacing any row with the same primary key. Returns the
    /// replaced row.
    pub fn upsert_row(&mut self, row: Row) -> Result<Option<Row>, StoreError> {
        let idx = self.table_index(&row.table)?;
        let table = &self.tables[idx];
        table.check_columns(&row)?;
        let pk = table.primary_key_of(&row)?;
        Ok(self.put(idx, pk, row))
    }

    fn put(&mut self, idx: usize, pk: Value, row: Row) -> Option<Row> {
        let new_id = row.shared_id;
        let old = self.tables[idx].rows.insert(pk.clone(), row);
        if let Some(old_id) = old.as_ref().and_then(|r| r.shared_id) {
            if Some(old_id) != new_id {
                self.shared.remove(&old_id);
            }
        }
        if let Some(id) = new_id {
            self.sealed.remove(&id);
            self.shared.insert(id, (idx, pk));
        }
        old
    }

    pub fn get(&self, table: &str, primary_key: &Value) -> Option<&Row> {
        self.table(table).and_then(|t| t.rows.get(primary_key))
    }

    pub fn delete_row(&mut self, table: &str, primary_key: &Value) -> Result<Option<Row>, StoreError> {
        let idx = self.table_index(table)?;
        let removed = self.tables[idx].rows.remove(primary_key);
        if let Some(id) = removed.as_ref().and_then(|r| r.shared_id) {
            self.shared.remove(&id);
        }
        Ok(removed)
    }

    pub fn query(&self, table: &str, predicate: &Predicate) -> Result<Vec<&Row>, StoreError> {
        let t = &self.tables[self.table_index(table)?];
        match predicate {
            Predicate::All => Ok(t.rows.values().collect()),
            Predicate::Eq(column, value) if *column == t.schema.primary_key => {
                Ok(t.rows.get(value).into_iter().collect())
            }
            Predicate::Eq(column, value) => {
                if !t.schema.has_column(column) {
                    return Err(StoreError::Schema(format!("table {table} has no column {column}")));
                }
                Ok(t.rows
                    .values()
                    .filter(|r| r.get(column).unwrap_or(&Value::Null) == value)
                    .collect())
            }
        }
    }

    /// Number of rows across all tables (decrypted rows only).
    pub fn row_count(&self) -> usize {
        self.tables.iter().map(Table::len).sum()
    }

    /// The decrypted shared row received under `id`.
    pub fn shared_row(&self, id: u64) -> Option<&Row> {
        let (idx, pk) = self.shared.get(&id)?;
        self.tables[*idx].rows.get(pk)
    }

    pub fn shared_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.shared.keys().copied()
    }

    /// Places a decrypted shared row. Unknown tables are created with the
    /// row's columns (primary key first); unknown columns widen the schema.
    pub fn integrate_shared(&mut self, row: Row) -> Result<Integration, StoreError> {
        let id = row
            .shared_id
            .ok_or_else(|| StoreError::Schema("integrate_shared needs a shared row".into()))?;
        let idx = match self.by_name.get(&row.table) {
            Some(&i) => i,
            None => {
                let first = row
                    .fields
                    .first()
                    .ok_or_else(|| StoreError::Schema("shared row has no fields".into()))?;
                let schema = TableSchema {
                    name: row.table.clone(),
                    columns: row.fields.iter().map(|(c, _)| c.clone()).collect(),
                    primary_key: first.0.clone(),
                };
                self.add_table(schema)?.0
            }
        };
        for (column, _) in &row.fields {
            if column == PROVENANCE_COLUMN || !statement::is_identifier(column) {
                return Err(StoreError::Schema(format!("invalid column name {column:?}")));
            }
            if !self.tables[idx].schema.has_column(column) {
                self.tables[idx].schema.columns.push(column.clone());
            }
        }
        let table = &self.tables[idx];
        table.check_columns(&row)?;
        let pk = table.primary_key_of(&row)?;
        let outcome = match table.rows.get(&pk).map(|r| r.shared_id) {
            None => Integration::Inserted,
            Some(None) => return Ok(Integration::Conflict),
            Some(Some(existing)) if existing > id => return Ok(Integration::Stale),
            Some(Some(existing)) if existing == id => Integration::Inserted,
            Some(Some(existing)) => Integration::Superseded(existing),
        };
        self.put(idx, pk, row);
        Ok(outcome)
    }

    /// Removes the decrypted shared row received under `id`.
    pub fn remove_shared(&mut self, id: u64) -> Option<Row> {
        let (idx, pk) = self.shared.remove(&id)?;
        self.tables[idx].rows.remove(&pk)
    }

    pub fn insert_sealed(&mut self, id: u64, ciphertext: Vec<u8>) {
        self.sealed.insert(id, ciphertext);
    }

    pub fn remove_sealed(&mut self, id: u64) -> Option<Vec<u8>> {
        self.sealed.remove(&id)
    }

    pub fn sealed(&self, id: u64) -> Option<&[u8]> {
        self.sealed.get(&id).map(Vec::as_slice)
    }

    /// Sealed shared lines in id order.
    pub fn sealed_lines(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.sealed.iter().map(|(id, c)| (*id, c.as_slice()))
    }

    /// Whether a shared line with `id` is present, sealed or decrypted.
    pub fn knows_shared(&self, id: u64) -> bool {
        self.sealed.contains_key(&id) || self.shared.contains_key(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn students() -> Store {
        let mut store = Store::new();
        store.create_table("students", &["id", "name"], "id").unwrap();
        store
    }

    fn student(id: i64, name: &str) -> Row {
        Row::new("students").with("id", id).with("name", name)
    }

    #[test]
    fn create_table_errors() {
        let mut store = students();
        assert!(store.table("students").unwrap().is_empty());
        assert_eq!(
            store.create_table("students", &["id"], "id"),
            Err(StoreError::DuplicateTable("students".into()))
        );
        assert!(matches!(
            store.create_table("people", &["id", "name"], "age"),
            Err(StoreError::Schema(_))
        ));
        assert!(matches!(
            store.create_table("p2", &["id", PROVENANCE_COLUMN], "id"),
            Err(StoreError::Schema(_))
        ));
        assert!(matches!(store.create_table("p3", &["id", "id"], "id"), Err(StoreError::Schema(_))));
    }

    #[test]
    fn upsert_and_query() {
        let mut store = students();
        store.upsert_row(student(12, "Alice")).unwrap();
        let found = store
            .query("students", &Predicate::Eq("id".into(), Value::Int(12)))
            .unwrap();
        assert_eq!(found, vec![&student(12, "Alice")]);

        let replaced = store.upsert_row(student(12, "Alicia")).unwrap();
        assert_eq!(replaced, Some(student(12, "Alice")));
        assert_eq!(store.get("students", &Value::Int(12)), Some(&student(12, "Alicia")));

        assert_eq!(
            store.upsert_row(Row::new("nope").with("id", 1)),
            Err(StoreError::UnknownTable("nope".into()))
        );
        assert!(matches!(
            store.upsert_row(Row::new("students").with("id", 1).with("age", 3)),
            Err(StoreError::Schema(_))
        ));
        assert!(matches!(
            store.upsert_row(Row::new("students").with("name", "x")),
            Err(StoreError::Schema(_))
        ));
    }

    #[test]
    fn query_predicates() {
        let mut store = students();
        for i in 0..40 {
            store.upsert_row(student(i, if i % 3 == 0 { "x" } else { "y" })).unwrap();
        }
        assert_eq!(store.query("students", &Predicate::All).unwrap().len(), 40);
        assert_eq!(
            store
                .query("students", &Predicate::Eq("name".into(), "x".into()))
                .unwrap()
                .len(),
            14
        );
        assert!(store
            .query("students", &Predicate::Eq("id".into(), Value::Int(999)))
            .unwrap()
            .is_empty());
        assert!(store
            .query("students", &Predicate::Eq("nope".into(), Value::Int(1)))
            .is_err());
    }

    #[test]
    fn serialize_round_trip() {
        let carol = student(23, "Carol");
        assert_eq!(deserialize_row(&serialize_row(&carol)).unwrap(), carol);
        let empty = student(1, "");
        assert_eq!(deserialize_row(&serialize_row(&empty)).unwrap(), empty);
        assert!(deserialize_row(b"").is_err());
        assert!(deserialize_row(b"\x02INSERT INTO t(a) VALUES(1);").is_err());
        assert!(deserialize_row(b"\x01INSERT INTO t(a) VALUES(1)").is_err());
    }

    #[test]
    fn shared_rows_supersede_by_id() {
        let mut store = students();
        store.upsert_row(student(12, "Alice")).unwrap();

        let mut v1 = student(40, "Dan");
        v1.shared_id = Some(27);
        assert_eq!(store.integrate_shared(v1).unwrap(), Integration::Inserted);

        let mut v2 = student(40, "Daniel");
        v2.shared_id = Some(30);
        assert_eq!(store.integrate_shared(v2.clone()).unwrap(), Integration::Superseded(27));
        assert!(store.shared_row(27).is_none());
        assert_eq!(store.shared_row(30), Some(&v2));

        let mut stale = student(40, "D");
        stale.shared_id = Some(29);
        assert_eq!(store.integrate_shared(stale).unwrap(), Integration::Stale);

        let mut clash = student(12, "Mallory");
        clash.shared_id = Some(50);
        assert_eq!(store.integrate_shared(clash).unwrap(), Integration::Conflict);
        assert_eq!(store.get("students", &Value::Int(12)), Some(&student(12, "Alice")));

        assert_eq!(store.remove_shared(30), Some(v2));
        assert_eq!(store.row_count(), 1);
    }

    #[test]
    fn shared_rows_create_and_widen_tables() {
        let mut store = Store::new();
        let mut row = Row::new("contacts").with("id", 5).with("email", "a@b");
        row.shared_id = Some(3);
        store.integrate_shared(row).unwrap();
        assert_eq!(store.table("contacts").unwrap().schema().primary_key, "id");

        let mut wider = Row::new("contacts").with("id", 5).with("email", "a@b").with("phone", "1");
        wider.shared_id = Some(4);
        assert_eq!(store.integrate_shared(wider).unwrap(), Integration::Superseded(3));
        assert!(store.table("contacts").unwrap().schema().has_column("phone"));
    }

    #[test]
    fn upsert_of_shared_row_unseals_it() {
        let mut store = students();
        store.insert_sealed(27, vec![1, 2, 3]);
        assert!(store.knows_shared(27));
        let mut row = student(40, "Dan");
        row.shared_id = Some(27);
        store.integrate_shared(row).unwrap();
        assert!(store.sealed(27).is_none());
        assert!(store.knows_shared(27));
        store.delete_row("students", &Value::Int(40)).unwrap();
        assert!(!store.knows_shared(27));
    }
}
