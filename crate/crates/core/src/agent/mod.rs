//! The client agent: a local store plus the grant, send, receive, use and
//! revoke sequences against a synchronizer.
//!
//! State directory layout:
//!
//! - `identity.json`: user id, password and private keys. Nothing else on
//!   disk or on the wire carries private key material.
//! - `journal.script` (+ `journal.script.tables`): the local store.
//! - `agent.json`: access lists, delivery history, retry queue, policy.
//!
//! Row keys fetched from the synchronizer are cached for the lifetime of the
//! agent value (one session). The first `use_row` of an id in a session asks
//! the synchronizer again, so a revocation is noticed at the latest on the
//! first use after the next start.

pub mod state;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientError, SyncClient};
use crate::crypto::{
    decrypt_row, encrypt_row, key_origin_payload, row_origin_payload, sign_payload, KeyUnwrapper, KeyWrapper, RowKey,
};
use crate::store::journal::{
    append_shared_lines, load_script, save_script, JournalError, KeyLookup, KeyResolver, LoadOptions, LoadReport,
    RevokedPolicy, SaveReport,
};
use crate::store::{deserialize_row, serialize_row, Integration, Row, Store, StoreError, TableSchema, Value};
use crate::wire::{
    DeleteDecryptingKey, DepositKey, ErrorBody, ErrorCode, GetPublicKeys, Request, Response, SendRow, UserKeys,
    WrappedKeyRecord,
};
pub use state::{AgentState, DossierRef, Grant, Identity, OutboxOp, SentEntry};

pub const IDENTITY_FILE: &str = "identity.json";
pub const STATE_FILE: &str = "agent.json";
pub const JOURNAL_FILE: &str = "journal.script";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("synchronizer unavailable: {0}")]
    Offline(String),
    #[error("{}: {}", .0.code.as_str(), .0.message)]
    Remote(ErrorBody),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Input(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("shared row {0} failed integrity checks and is quarantined")]
    Integrity(u64),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("injected fault {0:?}")]
    Injected(FaultPoint),
}

/// Places where a test can make the agent stop as if the process died.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// After received rows are in the journal, before they are deleted remotely.
    AfterReceiveStore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UseOutcome {
    Row(Row),
    Revoked,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Sent(u64),
    /// The synchronizer was unreachable; the send is in the retry queue.
    Queued,
    Rejected(ErrorBody),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrantOutcome {
    /// A fresh filtered copy was sent under this pending id.
    Sent(u64),
    /// The receiver's last copy is still current; its key was deposited again.
    Restored(u64),
    Queued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevokeOutcome {
    Done,
    /// Some key deletions are waiting in the retry queue.
    Pending,
}

#[derive(Clone)]
struct CachedKey {
    key: RowKey,
    #[allow(dead_code)]
    fetched_at: Instant,
}

struct Connection {
    addr: Option<String>,
    client: Option<SyncClient>,
    logged_in: bool,
}

impl Connection {
    fn raw(&mut self) -> Result<&mut SyncClient, AgentError> {
        if self.client.is_none() {
            let addr = self
                .addr
                .as_deref()
                .ok_or_else(|| AgentError::Offline("no synchronizer address configured".into()))?;
            let client = SyncClient::connect(addr).map_err(|e| AgentError::Offline(format!("{addr}: {e}")))?;
            self.client = Some(client);
            self.logged_in = false;
        }
        Ok(self.client.as_mut().expect("connected above"))
    }

    fn authed(&mut self, identity: &Identity) -> Result<&mut SyncClient, AgentError> {
        self.raw()?;
        if !self.logged_in {
            let r = self.raw()?.login(&identity.user_id, &identity.password);
            self.lift(r)?;
            self.logged_in = true;
        }
        self.raw()
    }

    /// Converts a client error, dropping the connection when it is unusable.
    fn lift<T>(&mut self, r: Result<T, ClientError>) -> Result<T, AgentError> {
        r.map_err(|e| match e {
            ClientError::Remote(body) => AgentError::Remote(body),
            ClientError::Transport(e) => {
                self.client = None;
                self.logged_in = false;
                AgentError::Offline(e.to_string())
            }
            ClientError::Protocol(m) => {
                self.client = None;
                self.logged_in = false;
                AgentError::Protocol(m)
            }
        })
    }
}

/// Resolves row keys through the cache and, for misses, one pipelined batch
/// of `getDecryptingKeyByIdPendingRow` calls.
struct KeyFetcher<'a> {
    conn: &'a mut Connection,
    identity: &'a Identity,
    cache: &'a mut HashMap<u64, CachedKey>,
    validated: &'a mut HashSet<u64>,
    unwrapper: &'a mut KeyUnwrapper,
    use_cache: bool,
}

impl KeyFetcher<'_> {
    fn open_record(&mut self, id: u64, record: WrappedKeyRecord) -> KeyLookup {
        if record.id_row != id || record.receiver != self.identity.user_id {
            return KeyLookup::Invalid(format!("key record for ({}, {})", record.id_row, record.receiver));
        }
        match self.unwrapper.unwrap(&record.wrapped_key) {
            Ok(key) => KeyLookup::Found(key),
            Err(e) => KeyLookup::Invalid(e.to_string()),
        }
    }
}

impl KeyResolver for KeyFetcher<'_> {
    fn resolve(&mut self, id: u64) -> KeyLookup {
        self.resolve_all(&[id]).pop().unwrap_or(KeyLookup::Unavailable)
    }

    fn resolve_all(&mut self, ids: &[u64]) -> Vec<KeyLookup> {
        let mut out = vec![KeyLookup::Unavailable; ids.len()];
        let mut missing = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.cache.get(id) {
                Some(c) if self.use_cache => out[i] = KeyLookup::Found(c.key.clone()),
                _ => missing.push(i),
            }
        }
        if missing.is_empty() {
            return out;
        }
        let wanted: Vec<u64> = missing.iter().map(|&i| ids[i]).collect();
        let results = match self.conn.authed(self.identity) {
            Ok(client) => client.decrypting_keys(&wanted),
            Err(_) => return out,
        };
        let results = match self.conn.lift(results) {
            Ok(r) => r,
            Err(_) => return out,
        };
        let now = Instant::now();
        for (i, result) in missing.into_iter().zip(results) {
            let id = ids[i];
            out[i] = match result {
                Ok(Some(record)) => self.open_record(id, record),
                Ok(None) => KeyLookup::Revoked,
                Err(_) => KeyLookup::Unavailable,
            };
            if let KeyLookup::Found(key) = &out[i] {
                self.cache.insert(id, CachedKey { key: key.clone(), fetched_at: now });
                self.validated.insert(id);
            }
        }
        out
    }
}

fn digest(bytes: &[u8]) -> Vec<u8> {
    Sha256::digest(bytes).to_vec()
}

/// The copy of `row` a receiver with `fields` may see: the primary key first,
/// then the permitted columns in the row's order.
pub fn filter_row(row: &Row, schema: &TableSchema, fields: &BTreeSet<String>) -> Row {
    let mut out = Row::new(row.table.clone());
    if let Some(pk) = row.get(&schema.primary_key) {
        out.fields.push((schema.primary_key.clone(), pk.clone()));
    }
    for (column, value) in &row.fields {
        if *column != schema.primary_key && fields.contains(column) {
            out.fields.push((column.clone(), value.clone()));
        }
    }
    out
}

struct Prepared {
    dossier: DossierRef,
    receiver: String,
    key: RowKey,
    digest: Vec<u8>,
    expiry: Option<u64>,
}

pub struct Agent {
    dir: PathBuf,
    identity: Identity,
    state: AgentState,
    store: Store,
    conn: Connection,
    keys: HashMap<u64, CachedKey>,
    validated: HashSet<u64>,
    unwrapper: KeyUnwrapper,
    wrapper: KeyWrapper,
    directory: HashMap<String, UserKeys>,
    quarantined: BTreeSet<u64>,
    fault: Option<FaultPoint>,
    last_load: LoadReport,
}

impl Agent {
    /// Creates a fresh identity in `dir`. Fails if one already exists.
    pub fn init(dir: &Path, user_id: &str, password: &str) -> Result<(), AgentError> {
        if user_id.is_empty() {
            return Err(AgentError::Input("empty user id".into()));
        }
        fs::create_dir_all(dir)?;
        let path = dir.join(IDENTITY_FILE);
        if path.exists() {
            return Err(AgentError::Input(format!("{} already exists", path.display())));
        }
        Identity::generate(user_id, password).save(&path)?;
        AgentState::default().save(&dir.join(STATE_FILE))?;
        Ok(())
    }

    /// Opens the agent in `dir` and loads its journal. Without a reachable
    /// synchronizer the agent works offline: shared lines stay encrypted.
    pub fn open(dir: &Path, sync_addr: Option<&str>) -> Result<Agent, AgentError> {
        let identity = Identity::load(&dir.join(IDENTITY_FILE))?;
        let state = AgentState::load(&dir.join(STATE_FILE))?;
        let mut agent = Agent {
            dir: dir.to_path_buf(),
            unwrapper: KeyUnwrapper::new(identity.enc.clone()),
            identity,
            state,
            store: Store::new(),
            conn: Connection {
                addr: sync_addr.map(str::to_string),
                client: None,
                logged_in: false,
            },
            keys: HashMap::new(),
            validated: HashSet::new(),
            wrapper: KeyWrapper::new(),
            directory: HashMap::new(),
            quarantined: BTreeSet::new(),
            fault: None,
            last_load: LoadReport::default(),
        };
        agent.reload()?;
        Ok(agent)
    }

    pub fn user_id(&self) -> &str {
        &self.identity.user_id
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn last_load(&self) -> &LoadReport {
        &self.last_load
    }

    pub fn quarantined(&self) -> &BTreeSet<u64> {
        &self.quarantined
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    pub fn set_fault(&mut self, fault: Option<FaultPoint>) {
        self.fault = fault;
    }

    pub fn policy(&self) -> RevokedPolicy {
        self.state.policy
    }

    pub fn set_policy(&mut self, policy: RevokedPolicy) -> Result<(), AgentError> {
        self.state.policy = policy;
        self.persist_state()
    }

    /// Points the agent at another synchronizer address (or none).
    pub fn set_sync_addr(&mut self, addr: Option<&str>) {
        self.conn = Connection {
            addr: addr.map(str::to_string),
            client: None,
            logged_in: false,
        };
    }

    fn persist_state(&self) -> Result<(), AgentError> {
        self.state.save(&self.dir.join(STATE_FILE))?;
        Ok(())
    }

    /// Starts a new session: drops cached keys and reloads the journal.
    pub fn reload(&mut self) -> Result<LoadReport, AgentError> {
        self.keys.clear();
        self.validated.clear();
        let options = LoadOptions {
            on_revoked: self.state.policy,
        };
        let path = self.journal_path();
        let mut fetcher = KeyFetcher {
            conn: &mut self.conn,
            identity: &self.identity,
            cache: &mut self.keys,
            validated: &mut self.validated,
            unwrapper: &mut self.unwrapper,
            use_cache: true,
        };
        let (store, report) = load_script(&path, &mut fetcher, &options)?;
        self.store = store;
        self.quarantined = report.integrity_failures.iter().copied().collect();
        self.last_load = report.clone();
        Ok(report)
    }

    /// Writes the journal (re-encrypting shared rows under their cached keys)
    /// and the agent state.
    pub fn save(&mut self) -> Result<SaveReport, AgentError> {
        let cache = &self.keys;
        let mut resolver = |id: u64| {
            cache
                .get(&id)
                .map_or(KeyLookup::Unavailable, |c| KeyLookup::Found(c.key.clone()))
        };
        let report = save_script(&self.store, &self.journal_path(), &mut resolver)?;
        self.persist_state()?;
        Ok(report)
    }

    /// Publishes this identity's public keys to the synchronizer.
    pub fn register(&mut self) -> Result<(), AgentError> {
        let (enc, sig) = (self.identity.enc.public(), self.identity.sig.public());
        let r = self
            .conn
            .raw()?
            .register_user(&self.identity.user_id, &self.identity.password, enc, sig);
        self.conn.lift(r)
    }

    pub fn all_users(&mut self) -> Result<Vec<String>, AgentError> {
        let r = self.conn.raw()?.all_users();
        self.conn.lift(r)
    }

    pub fn create_table(&mut self, name: &str, columns: &[&str], primary_key: &str) -> Result<(), AgentError> {
        self.store.create_table(name, columns, primary_key)?;
        Ok(())
    }

    /// Inserts or replaces an owned row. Rows received from others cannot be
    /// overwritten locally.
    pub fn put(&mut self, mut row: Row) -> Result<(), AgentError> {
        row.shared_id = None;
        let table = self
            .store
            .table(&row.table)
            .ok_or_else(|| StoreError::UnknownTable(row.table.clone()))?;
        if let Some(pk) = row.get(&table.schema().primary_key) {
            if self.store.get(&row.table, pk).is_some_and(|r| !r.is_owned()) {
                return Err(AgentError::Input(format!(
                    "{}[{pk}] was received from another owner",
                    row.table
                )));
            }
        }
        self.store.upsert_row(row)?;
        Ok(())
    }

    fn owned_row(&self, dossier: &DossierRef) -> Result<(&Row, &TableSchema), AgentError> {
        let table = self
            .store
            .table(&dossier.table)
            .ok_or_else(|| AgentError::NotFound(format!("table {}", dossier.table)))?;
        let row = self
            .store
            .get(&dossier.table, &dossier.pk)
            .ok_or_else(|| AgentError::NotFound(format!("{}[{}]", dossier.table, dossier.pk)))?;
        if !row.is_owned() {
            return Err(AgentError::Input(format!(
                "{}[{}] is owned by another user",
                dossier.table, dossier.pk
            )));
        }
        Ok((row, table.schema()))
    }

    /// The filtered copy `receiver` would get of `dossier` under its current grant.
    pub fn filtered_copy(&self, dossier: &DossierRef, receiver: &str) -> Result<Row, AgentError> {
        let (row, schema) = self.owned_row(dossier)?;
        let grant = self
            .state
            .grants
            .get(&(dossier.clone(), receiver.to_string()))
            .ok_or_else(|| AgentError::NotFound(format!("grant of {}[{}] to {receiver}", dossier.table, dossier.pk)))?;
        Ok(filter_row(row, schema, &grant.fields))
    }

    fn public_keys(&mut self, user: &str) -> Result<UserKeys, AgentError> {
        if let Some(k) = self.directory.get(user) {
            return Ok(k.clone());
        }
        let r = self.conn.raw()?.public_keys(user);
        match self.conn.lift(r) {
            Ok(keys) => {
                self.directory.insert(user.to_string(), keys.clone());
                Ok(keys)
            }
            Err(AgentError::Remote(e)) if e.code == ErrorCode::NotFound => {
                Err(AgentError::NotFound(format!("user {user}")))
            }
            Err(e) => Err(e),
        }
    }

    /// Fetches directory entries for every receiver not yet known, pipelined.
    fn ensure_public_keys(&mut self, users: &BTreeSet<String>) -> Result<(), AgentError> {
        let missing: Vec<String> = users
            .iter()
            .filter(|u| !self.directory.contains_key(*u))
            .cloned()
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let requests = missing
            .iter()
            .map(|u| Request::GetPublicKeys(GetPublicKeys { user_id: u.clone() }))
            .collect();
        let r = self.conn.raw()?.call_many(requests);
        for result in self.conn.lift(r)? {
            if let Ok(Response::PublicKeys(keys)) = result {
                self.directory.insert(keys.user_id.clone(), keys);
            }
        }
        Ok(())
    }

    /// Records that `receiver` may see `fields` of `dossier`, without any
    /// network traffic. The primary key is always permitted.
    pub fn set_access(
        &mut self,
        dossier: &DossierRef,
        receiver: &str,
        fields: &[&str],
        expiry: Option<u64>,
    ) -> Result<(), AgentError> {
        if receiver == self.identity.user_id {
            return Err(AgentError::Input("a dossier cannot be granted to its owner".into()));
        }
        let (_, schema) = self.owned_row(dossier)?;
        let mut permitted = BTreeSet::from([schema.primary_key.clone()]);
        for f in fields {
            if !schema.has_column(f) {
                return Err(AgentError::Input(format!("table {} has no column {f}", dossier.table)));
            }
            permitted.insert(f.to_string());
        }
        self.state.grants.insert(
            (dossier.clone(), receiver.to_string()),
            Grant {
                fields: permitted,
                expiry,
            },
        );
        Ok(())
    }

    /// Grants `receiver` access to `fields` of `dossier` and delivers it. If
    /// the receiver's last delivered copy is still current (for instance after
    /// a revoke), its key is deposited again instead of sending a new copy.
    pub fn grant(
        &mut self,
        dossier: &DossierRef,
        receiver: &str,
        fields: &[&str],
        expiry: Option<u64>,
    ) -> Result<GrantOutcome, AgentError> {
        self.set_access(dossier, receiver, fields, expiry)?;
        match self.public_keys(receiver) {
            Ok(_) | Err(AgentError::Offline(_)) => {}
            Err(e) => {
                self.state.grants.remove(&(dossier.clone(), receiver.to_string()));
                return Err(e);
            }
        }
        self.flush_outbox_quietly();

        let target = (dossier.clone(), receiver.to_string());
        let current = digest(&serialize_row(&self.filtered_copy(dossier, receiver)?));
        let last = self.state.sent.get(&target).and_then(|v| v.last()).cloned();
        if let Some(entry) = last.filter(|e| e.digest == current) {
            let outcome = match self.deposit(dossier, receiver, &entry, expiry) {
                Ok(()) => GrantOutcome::Restored(entry.id),
                Err(AgentError::Offline(_)) => {
                    self.queue(OutboxOp::Deposit {
                        dossier: dossier.clone(),
                        receiver: receiver.to_string(),
                        entry,
                    });
                    GrantOutcome::Queued
                }
                Err(e) => return Err(e),
            };
            self.persist_state()?;
            return Ok(outcome);
        }

        let mut outcomes = self.send_jobs(vec![target])?;
        match outcomes.pop().map(|(_, _, o)| o) {
            Some(SendOutcome::Sent(id)) => Ok(GrantOutcome::Sent(id)),
            Some(SendOutcome::Queued) => Ok(GrantOutcome::Queued),
            Some(SendOutcome::Rejected(e)) => Err(AgentError::Remote(e)),
            None => Err(AgentError::NotFound(format!("user {receiver}"))),
        }
    }

    /// Sends a fresh filtered copy of `dossier` to every granted receiver.
    pub fn send(&mut self, dossier: &DossierRef) -> Result<Vec<(String, SendOutcome)>, AgentError> {
        self.owned_row(dossier)?;
        Ok(self
            .send_all(std::slice::from_ref(dossier))?
            .into_iter()
            .map(|(_, r, o)| (r, o))
            .collect())
    }

    /// Pipelined [`send`](Self::send) over many dossiers.
    pub fn send_all(
        &mut self,
        dossiers: &[DossierRef],
    ) -> Result<Vec<(DossierRef, String, SendOutcome)>, AgentError> {
        let mut jobs = Vec::new();
        for d in dossiers {
            jobs.extend(self.state.receivers(d).map(|(r, _)| (d.clone(), r.to_string())));
        }
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        self.flush_outbox_quietly();
        self.send_jobs(jobs)
    }

    fn queue(&mut self, op: OutboxOp) {
        if !self.state.outbox.contains(&op) {
            self.state.outbox.push(op);
        }
    }

    fn queue_sends(&mut self, jobs: impl IntoIterator<Item = (DossierRef, String)>) {
        for (dossier, receiver) in jobs {
            self.queue(OutboxOp::Send { dossier, receiver });
        }
    }

    /// Send-then-deposit for each (dossier, receiver) job: encrypt the
    /// filtered copy under a fresh key, send it, then deposit the wrapped key
    /// bound to the returned pending id.
    fn send_jobs(
        &mut self,
        jobs: Vec<(DossierRef, String)>,
    ) -> Result<Vec<(DossierRef, String, SendOutcome)>, AgentError> {
        let receivers: BTreeSet<String> = jobs.iter().map(|(_, r)| r.clone()).collect();
        if let Err(e) = self.ensure_public_keys(&receivers) {
            return match e {
                AgentError::Offline(_) => {
                    let out = jobs
                        .iter()
                        .map(|(d, r)| (d.clone(), r.clone(), SendOutcome::Queued))
                        .collect();
                    self.queue_sends(jobs);
                    self.persist_state()?;
                    Ok(out)
                }
                e => Err(e),
            };
        }

        let me = self.identity.user_id.clone();
        let mut outcomes = Vec::with_capacity(jobs.len());
        let mut prepared = Vec::with_capacity(jobs.len());
        let mut requests = Vec::with_capacity(jobs.len());
        for (dossier, receiver) in jobs {
            let Some(grant) = self.state.grants.get(&(dossier.clone(), receiver.clone())) else {
                continue;
            };
            if !self.directory.contains_key(&receiver) {
                let e = ErrorBody::new(ErrorCode::NotFound, format!("no user {receiver}"));
                outcomes.push((dossier, receiver, SendOutcome::Rejected(e)));
                continue;
            }
            let expiry = grant.expiry;
            let Ok((row, schema)) = self.owned_row(&dossier) else { continue };
            let plain = serialize_row(&filter_row(row, schema, &grant.fields));
            let key = RowKey::generate();
            let encrypted_row = encrypt_row(&plain, &key);
            let origin_sig = sign_payload(&row_origin_payload(&me, &receiver, &encrypted_row), &self.identity.sig);
            requests.push(Request::SendRow(SendRow {
                sender: me.clone(),
                receiver: receiver.clone(),
                encrypted_row,
                origin_sig,
            }));
            prepared.push(Prepared {
                dossier,
                receiver,
                key,
                digest: digest(&plain),
                expiry,
            });
        }
        if prepared.is_empty() {
            return Ok(outcomes);
        }

        let sent = match self.conn.authed(&self.identity) {
            Ok(client) => {
                let r = client.call_many(requests);
                self.conn.lift(r)
            }
            Err(e) => Err(e),
        };
        let sent = match sent {
            Ok(s) => s,
            Err(AgentError::Offline(_)) => {
                for p in prepared {
                    outcomes.push((p.dossier.clone(), p.receiver.clone(), SendOutcome::Queued));
                    self.queue(OutboxOp::Send {
                        dossier: p.dossier,
                        receiver: p.receiver,
                    });
                }
                self.persist_state()?;
                return Ok(outcomes);
            }
            Err(e) => return Err(e),
        };

        let mut deposits = Vec::new();
        let mut deposit_requests = Vec::new();
        for (p, result) in prepared.into_iter().zip(sent) {
            let id = match result {
                Ok(Response::PendingId(r)) => r.id_pending_row,
                Ok(other) => {
                    let e = ErrorBody::new(ErrorCode::Internal, format!("unexpected response {other:?}"));
                    outcomes.push((p.dossier, p.receiver, SendOutcome::Rejected(e)));
                    continue;
                }
                Err(e) => {
                    outcomes.push((p.dossier, p.receiver, SendOutcome::Rejected(e)));
                    continue;
                }
            };
            let entry = SentEntry {
                id,
                key: p.key,
                digest: p.digest,
            };
            self.state
                .sent
                .entry((p.dossier.clone(), p.receiver.clone()))
                .or_default()
                .push(entry.clone());
            let record = self.key_record(&p.receiver, &entry, p.expiry)?;
            deposit_requests.push(Request::DepositKey(DepositKey { record }));
            deposits.push((p.dossier, p.receiver, entry));
        }

        if !deposit_requests.is_empty() {
            let r = self.conn.authed(&self.identity).map(|c| c.call_many(deposit_requests));
            let results = match r {
                Ok(r) => self.conn.lift(r),
                Err(e) => Err(e),
            };
            match results {
                Ok(results) => {
                    for ((dossier, receiver, entry), result) in deposits.into_iter().zip(results) {
                        let outcome = match result {
                            Ok(_) => SendOutcome::Sent(entry.id),
                            Err(e) => SendOutcome::Rejected(e),
                        };
                        outcomes.push((dossier, receiver, outcome));
                    }
                }
                Err(AgentError::Offline(_)) => {
                    for (dossier, receiver, entry) in deposits {
                        outcomes.push((dossier.clone(), receiver.clone(), SendOutcome::Queued));
                        self.queue(OutboxOp::Deposit {
                            dossier,
                            receiver,
                            entry,
                        });
                    }
                }
                Err(e) => {
                    self.persist_state()?;
                    return Err(e);
                }
            }
        }
        self.persist_state()?;
        Ok(outcomes)
    }

    fn key_record(&mut self, receiver: &str, entry: &SentEntry, expiry: Option<u64>) -> Result<WrappedKeyRecord, AgentError> {
        let enc_public = self
            .directory
            .get(receiver)
            .map(|k| k.enc_public)
            .ok_or_else(|| AgentError::NotFound(format!("user {receiver}")))?;
        let wrapped_key = self
            .wrapper
            .wrap(&entry.key, &enc_public)
            .map_err(|e| AgentError::Input(e.to_string()))?;
        let me = &self.identity.user_id;
        let origin_sig = sign_payload(
            &key_origin_payload(entry.id, me, receiver, expiry, &wrapped_key),
            &self.identity.sig,
        );
        Ok(WrappedKeyRecord {
            id_row: entry.id,
            sender: me.clone(),
            receiver: receiver.to_string(),
            expiry,
            wrapped_key,
            origin_sig,
        })
    }

    fn deposit(
        &mut self,
        _dossier: &DossierRef,
        receiver: &str,
        entry: &SentEntry,
        expiry: Option<u64>,
    ) -> Result<(), AgentError> {
        self.public_keys(receiver)?;
        let record = self.key_record(receiver, entry, expiry)?;
        let r = self.conn.authed(&self.identity)?.deposit_key(record);
        self.conn.lift(r)
    }

    fn delete_keys(&mut self, receiver: &str, ids: &[u64]) -> Result<(), AgentError> {
        let requests = ids
            .iter()
            .map(|&id_row| {
                Request::DeleteDecryptingKey(DeleteDecryptingKey {
                    id_row,
                    receiver: receiver.to_string(),
                })
            })
            .collect();
        let r = self.conn.authed(&self.identity)?.call_many(requests);
        for result in self.conn.lift(r)? {
            result.map_err(AgentError::Remote)?;
        }
        Ok(())
    }

    /// Revokes `receiver`'s access to `dossier`: every key record deposited
    /// for it is deleted at the synchronizer and later sends skip it.
    pub fn revoke(&mut self, dossier: &DossierRef, receiver: &str) -> Result<RevokeOutcome, AgentError> {
        if let Some(row) = self.store.get(&dossier.table, &dossier.pk) {
            if !row.is_owned() {
                return Err(AgentError::Input(format!(
                    "{}[{}] is owned by another user",
                    dossier.table, dossier.pk
                )));
            }
        }
        let target = (dossier.clone(), receiver.to_string());
        self.state.grants.remove(&target);
        let mut ids: BTreeSet<u64> = self
            .state
            .sent
            .get(&target)
            .into_iter()
            .flatten()
            .map(|e| e.id)
            .collect();
        self.state.outbox.retain(|op| {
            if op.target() != (dossier, receiver) {
                return true;
            }
            if let OutboxOp::Revoke { ids: queued, .. } = op {
                ids.extend(queued);
            }
            false
        });
        if ids.is_empty() {
            self.persist_state()?;
            return Ok(RevokeOutcome::Done);
        }
        let ids: Vec<u64> = ids.into_iter().collect();
        let outcome = match self.delete_keys(receiver, &ids) {
            Ok(()) => RevokeOutcome::Done,
            Err(AgentError::Offline(_)) => {
                self.queue(OutboxOp::Revoke {
                    dossier: dossier.clone(),
                    receiver: receiver.to_string(),
                    ids,
                });
                RevokeOutcome::Pending
            }
            Err(e) => {
                self.queue(OutboxOp::Revoke {
                    dossier: dossier.clone(),
                    receiver: receiver.to_string(),
                    ids,
                });
                self.persist_state()?;
                return Err(e);
            }
        };
        self.persist_state()?;
        Ok(outcome)
    }

    /// Updates an owned dossier and sends the new version to its receivers.
    pub fn modify_and_sync(
        &mut self,
        dossier: &DossierRef,
        changes: &[(&str, Value)],
    ) -> Result<Vec<(String, SendOutcome)>, AgentError> {
        let (row, schema) = self.owned_row(dossier)?;
        let mut row = row.clone();
        for (column, value) in changes {
            if *column == schema.primary_key {
                return Err(AgentError::Input("the primary key of a dossier cannot change".into()));
            }
            row.set(column, value.clone());
        }
        self.store.upsert_row(row)?;
        self.send(dossier)
    }

    fn flush_outbox_quietly(&mut self) {
        if !self.state.outbox.is_empty() {
            let _ = self.flush_outbox();
        }
    }

    /// Retries queued operations in order. Stops at the first transport
    /// failure; returns how many operations completed.
    pub fn flush_outbox(&mut self) -> Result<usize, AgentError> {
        if self.state.outbox.is_empty() {
            return Ok(0);
        }
        let ops = std::mem::take(&mut self.state.outbox);
        let mut done = 0;
        let mut remaining = Vec::new();
        let mut sends = Vec::new();
        let mut offline = false;
        for op in ops {
            if offline {
                remaining.push(op);
                continue;
            }
            let granted = {
                let (d, r) = op.target();
                self.state.grants.contains_key(&(d.clone(), r.to_string()))
            };
            let result = match &op {
                OutboxOp::Send { dossier, receiver } => {
                    if granted {
                        sends.push((dossier.clone(), receiver.clone()));
                    }
                    Ok(())
                }
                OutboxOp::Deposit {
                    dossier,
                    receiver,
                    entry,
                } if granted => {
                    let expiry = self
                        .state
                        .grants
                        .get(&(dossier.clone(), receiver.clone()))
                        .and_then(|g| g.expiry);
                    self.deposit(dossier, receiver, entry, expiry)
                }
                OutboxOp::Deposit { .. } => Ok(()),
                OutboxOp::Revoke { receiver, ids, .. } => self.delete_keys(receiver, ids),
            };
            match result {
                Ok(()) => done += 1,
                Err(AgentError::Offline(_)) => {
                    offline = true;
                    remaining.push(op);
                }
                // A rejected retry will never succeed; drop it.
                Err(_) => done += 1,
            }
        }
        self.state.outbox = remaining;
        if !sends.is_empty() {
            if offline {
                self.queue_sends(sends);
            } else {
                self.send_jobs(sends)?;
            }
        }
        self.persist_state()?;
        Ok(done)
    }

    /// Fetches every pending row addressed to this user, stores each one
    /// encrypted in the journal, then deletes it at the synchronizer. Ids
    /// already held locally are not stored twice. Returns the number of new rows.
    pub fn receive(&mut self) -> Result<usize, AgentError> {
        let journal = self.journal_path();
        let mut after = None;
        let mut integrated = 0;
        loop {
            let r = self.conn.authed(&self.identity)?.pending_rows(after, None);
            let page = self.conn.lift(r)?;
            let Some(last) = page.last() else { break };
            after = Some(last.id_pending_row);

            let mut fresh: Vec<(u64, Vec<u8>)> = Vec::new();
            let mut seen = HashSet::with_capacity(page.len());
            let mut ids = Vec::with_capacity(page.len());
            for row in page {
                ids.push(row.id_pending_row);
                if row.receiver != self.identity.user_id
                    || self.store.knows_shared(row.id_pending_row)
                    || !seen.insert(row.id_pending_row)
                {
                    continue;
                }
                fresh.push((row.id_pending_row, row.encrypted_row));
            }
            let lines: Vec<(u64, &[u8])> = fresh.iter().map(|(id, c)| (*id, c.as_slice())).collect();
            append_shared_lines(&journal, &lines)?;
            integrated += fresh.len();
            for (id, ciphertext) in fresh {
                self.store.insert_sealed(id, ciphertext);
            }
            if self.fault == Some(FaultPoint::AfterReceiveStore) {
                return Err(AgentError::Injected(FaultPoint::AfterReceiveStore));
            }

            let requests = ids
                .into_iter()
                .map(|id_pending_row| Request::DeletePendingRow(crate::wire::DeletePendingRow { id_pending_row }))
                .collect();
            let r = self.conn.authed(&self.identity)?.call_many(requests);
            for result in self.conn.lift(r)? {
                result.map_err(AgentError::Remote)?;
            }
        }
        Ok(integrated)
    }

    fn quarantine(&mut self, id: u64) {
        self.keys.remove(&id);
        self.validated.remove(&id);
        self.quarantined.insert(id);
    }

    fn on_revoked(&mut self, id: u64) {
        let cached = self.keys.remove(&id);
        self.validated.remove(&id);
        match self.state.policy {
            RevokedPolicy::Delete => {
                self.store.remove_shared(id);
                self.store.remove_sealed(id);
            }
            RevokedPolicy::Retain => {
                if let (Some(row), Some(c)) = (self.store.shared_row(id).cloned(), cached) {
                    self.store.remove_shared(id);
                    self.store.insert_sealed(id, encrypt_row(&serialize_row(&row), &c.key));
                }
            }
        }
    }

    /// Opens the shared row received under `id`. The first use of an id in a
    /// session asks the synchronizer for its key even when one is cached.
    pub fn use_row(&mut self, id: u64) -> Result<UseOutcome, AgentError> {
        if !self.store.knows_shared(id) {
            return Err(AgentError::NotFound(format!("shared row {id}")));
        }
        if self.quarantined.contains(&id) {
            return Err(AgentError::Integrity(id));
        }

        let key = if self.validated.contains(&id) {
            self.keys[&id].key.clone()
        } else {
            let mut fetcher = KeyFetcher {
                conn: &mut self.conn,
                identity: &self.identity,
                cache: &mut self.keys,
                validated: &mut self.validated,
                unwrapper: &mut self.unwrapper,
                use_cache: false,
            };
            match fetcher.resolve(id) {
                KeyLookup::Found(key) => key,
                KeyLookup::Revoked => {
                    self.on_revoked(id);
                    return Ok(UseOutcome::Revoked);
                }
                KeyLookup::Unavailable => match self.keys.get(&id) {
                    Some(c) => c.key.clone(),
                    None => return Ok(UseOutcome::Unavailable),
                },
                KeyLookup::Invalid(_) => {
                    self.quarantine(id);
                    return Err(AgentError::Integrity(id));
                }
            }
        };

        if let Some(row) = self.store.shared_row(id) {
            return Ok(UseOutcome::Row(row.clone()));
        }
        let ciphertext = self.store.sealed(id).map(<[u8]>::to_vec).unwrap_or_default();
        let opened = decrypt_row(&ciphertext, &key)
            .ok()
            .and_then(|plain| deserialize_row(&plain).ok());
        let Some(mut row) = opened else {
            self.quarantine(id);
            return Err(AgentError::Integrity(id));
        };
        row.shared_id = Some(id);
        match self.store.integrate_shared(row.clone()) {
            Ok(Integration::Inserted) => {
                self.store.remove_sealed(id);
            }
            Ok(Integration::Superseded(old)) => {
                self.store.remove_sealed(id);
                self.keys.remove(&old);
                self.validated.remove(&old);
            }
            Ok(Integration::Stale) => {
                self.store.remove_sealed(id);
                self.keys.remove(&id);
                self.validated.remove(&id);
            }
            // The primary key is taken by an owned row; keep the line sealed.
            Ok(Integration::Conflict) => {}
            Err(_) => {
                self.quarantine(id);
                return Err(AgentError::Integrity(id));
            }
        }
        Ok(UseOutcome::Row(row))
    }

    /// Ids of shared lines currently held, decrypted or sealed.
    pub fn shared_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.store.shared_ids().collect();
        ids.extend(self.store.sealed_lines().map(|(id, _)| id));
        ids.sort_unstable();
        ids
    }
}
