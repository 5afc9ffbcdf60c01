//! The statement dialect written to journal files.
//!
//! Only two statement shapes exist:
//!
//! ```text
//! INSERT INTO students(id,name) VALUES(12,'Alice');
//! CREATE TABLE students(id,name,PRIMARY KEY(id));
//! ```
//!
//! Literals are signed 64-bit integers, `NULL`, or single-quoted strings. In a
//! string, `'` is doubled, and backslash, line feed and carriage return are
//! written as `\\`, `\n` and `\r` so that every statement stays on one line.

use std::fmt::Write as _;

use thiserror::Error;

use super::{Row, TableSchema, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("statement parse error at byte {offset}: {reason}")]
pub struct StatementError {
    pub offset: usize,
    pub reason: String,
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn write_literal(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("NULL"),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Text(s) => {
            out.push('\'');
            for c in s.chars() {
                match c {
                    '\'' => out.push_str("''"),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    c => out.push(c),
                }
            }
            out.push('\'');
        }
    }
}

pub fn format_insert(row: &Row) -> String {
    let mut out = String::with_capacity(32 + row.fields.len() * 24);
    out.push_str("INSERT INTO ");
    out.push_str(&row.table);
    out.push('(');
    for (i, (name, _)) in row.fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(name);
    }
    out.push_str(") VALUES(");
    for (i, (_, value)) in row.fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_literal(&mut out, value);
    }
    out.push_str(");");
    out
}

pub fn format_create(schema: &TableSchema) -> String {
    format!(
        "CREATE TABLE {}({},PRIMARY KEY({}));",
        schema.name,
        schema.columns.join(","),
        schema.primary_key
    )
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor { text, pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> StatementError {
        StatementError {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start_matches([' ', '\t']);
        self.pos = self.text.len() - trimmed.len();
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), StatementError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn keyword(&mut self, word: &str) -> Result<(), StatementError> {
        self.skip_ws();
        let rest = self.rest();
        if rest.len() >= word.len() && rest[..word.len()].eq_ignore_ascii_case(word) {
            let after = rest[word.len()..].chars().next();
            if !matches!(after, Some(c) if c.is_ascii_alphanumeric() || c == '_') {
                self.pos += word.len();
                return Ok(());
            }
        }
        Err(self.err(format!("expected keyword {word}")))
    }

    fn identifier(&mut self) -> Result<&'a str, StatementError> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let ident = &rest[..len];
        if !is_identifier(ident) {
            return Err(self.err("expected identifier"));
        }
        self.pos += len;
        Ok(ident)
    }

    fn literal(&mut self) -> Result<Value, StatementError> {
        self.skip_ws();
        match self.peek() {
            Some('\'') => self.string(),
            Some(c) if c == '-' || c.is_ascii_digit() => self.integer(),
            Some(_) => {
                self.keyword("NULL")?;
                Ok(Value::Null)
            }
            None => Err(self.err("expected literal")),
        }
    }

    fn integer(&mut self) -> Result<Value, StatementError> {
        let rest = self.rest();
        let sign = usize::from(rest.starts_with('-'));
        let digits = rest[sign..].bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.err("expected digits"));
        }
        let text = &rest[..sign + digits];
        let value = text
            .parse::<i64>()
            .map_err(|_| self.err("integer out of range"))?;
        self.pos += text.len();
        Ok(Value::Int(value))
    }

    fn string(&mut self) -> Result<Value, StatementError> {
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        loop {
            let rest = self.rest();
            let Some(idx) = rest.find(['\'', '\\']) else {
                self.pos = start;
                return Err(self.err("unterminated string"));
            };
            out.push_str(&rest[..idx]);
            self.pos += idx;
            let tail = &self.rest()[1..];
            if self.rest().starts_with('\'') {
                if tail.starts_with('\'') {
                    out.push('\'');
                    self.pos += 2;
                } else {
                    self.pos += 1;
                    return Ok(Value::Text(out));
                }
            } else {
                match tail.chars().next() {
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    _ => return Err(self.err("invalid escape")),
                }
                self.pos += 2;
            }
        }
    }

    fn finish(&mut self) -> Result<(), StatementError> {
        self.expect(';')?;
        self.skip_ws();
        if self.pos != self.text.len() {
            return Err(self.err("trailing characters"));
        }
        Ok(())
    }
}

pub fn parse_insert(text: &str) -> Result<Row, StatementError> {
    let mut cur = Cursor::new(text);
    cur.keyword("INSERT")?;
    cur.keyword("INTO")?;
    let table = cur.identifier()?.to_string();
    cur.expect('(')?;
    let mut columns = Vec::new();
    loop {
        columns.push(cur.identifier()?.to_string());
        if !cur.eat(',') {
            break;
        }
    }
    cur.expect(')')?;
    cur.keyword("VALUES")?;
    cur.expect('(')?;
    let mut values = Vec::with_capacity(columns.len());
    loop {
        values.push(cur.literal()?);
        if !cur.eat(',') {
            break;
        }
    }
    cur.expect(')')?;
    cur.finish()?;
    if values.len() != columns.len() {
        return Err(StatementError {
            offset: 0,
            reason: format!("{} columns but {} values", columns.len(), values.len()),
        });
    }
    Ok(Row {
        table,
        fields: columns.into_iter().zip(values).collect(),
        shared_id: None,
    })
}

pub fn parse_create(text: &str) -> Result<TableSchema, StatementError> {
    let mut cur = Cursor::new(text);
    cur.keyword("CREATE")?;
    cur.keyword("TABLE")?;
    let name = cur.identifier()?.to_string();
    cur.expect('(')?;
    let mut columns = Vec::new();
    let primary_key = loop {
        let save = cur.pos;
        if cur.keyword("PRIMARY").is_ok() {
            cur.keyword("KEY")?;
            cur.expect('(')?;
            let pk = cur.identifier()?.to_string();
            cur.expect(')')?;
            break pk;
        }
        cur.pos = save;
        columns.push(cur.identifier()?.to_string());
        cur.expect(',')?;
    };
    cur.expect(')')?;
    cur.finish()?;
    Ok(TableSchema {
        name,
        columns,
        primary_key,
    })
}
