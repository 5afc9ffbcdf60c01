//! The synchronizer: an untrusted mailbox for encrypted pending rows and
//! wrapped row keys.
//!
//! It holds user directory entries, pending rows (ciphertext only), and
//! wrapped-key records, and checks origin signatures on everything it stores.
//! Every mutation is written to the operation log before it is applied, and
//! all operations run under one lock, so ids are assigned strictly in order.

pub mod log;
pub mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::crypto::{
    key_origin_payload, row_origin_payload, to_hex, verify_payload, EncryptionPublicKey, Signature,
    VerifyingPublicKey,
};
use crate::wire::{
    self, ErrorBody, ErrorCode, PendingRow, Request, RequestEnvelope, Response, ResponseEnvelope, UserKeys,
    WrappedKeyRecord,
};
use log::{LogRecord, OpLog};

/// Most rows returned by one `getPendingRowForUser` call.
pub const PAGE_LIMIT: usize = 1000;
/// Approximate byte budget of one page of pending rows on the wire.
const PAGE_BYTES: usize = 768 * 1024;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    #[serde(with = "wire::hex_bytes")]
    pub salt: Vec<u8>,
    #[serde(with = "wire::hex_bytes")]
    pub auth_digest: Vec<u8>,
    pub enc_public: EncryptionPublicKey,
    pub sig_public: VerifyingPublicKey,
    pub registered_at: u64,
}

fn password_digest(salt: &[u8], password: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"dossync/password/v1");
    h.update((salt.len() as u64).to_be_bytes());
    h.update(salt);
    h.update(password.as_bytes());
    h.finalize().to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRow {
    pub row: PendingRow,
    pub delivered: bool,
}

/// Everything the synchronizer persists. Two states compare equal iff they
/// hold the same users, rows (delivered or not) and key records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncState {
    pub users: BTreeMap<String, UserRecord>,
    pub rows: BTreeMap<u64, StoredRow>,
    pub keys: BTreeMap<(u64, String), WrappedKeyRecord>,
    mailboxes: BTreeMap<String, BTreeSet<u64>>,
    next_id: u64,
}

impl SyncState {
    fn apply(&mut self, record: LogRecord) {
        match record {
            LogRecord::UserRegistered { user } => {
                self.users.insert(user.user_id.clone(), user);
            }
            LogRecord::RowStored { row } => {
                self.next_id = self.next_id.max(row.id_pending_row + 1);
                self.mailboxes
                    .entry(row.receiver.clone())
                    .or_default()
                    .insert(row.id_pending_row);
                self.rows.insert(row.id_pending_row, StoredRow { row, delivered: false });
            }
            LogRecord::RowDelivered { id } => {
                if let Some(stored) = self.rows.get_mut(&id) {
                    stored.delivered = true;
                    if let Some(mb) = self.mailboxes.get_mut(&stored.row.receiver) {
                        mb.remove(&id);
                    }
                }
            }
            LogRecord::KeyStored { record } => {
                self.keys.insert((record.id_row, record.receiver.clone()), record);
            }
            LogRecord::KeyDeleted { id_row, receiver } => {
                self.keys.remove(&(id_row, receiver));
            }
        }
    }

    /// Next pending-row id to be assigned.
    pub fn next_id(&self) -> u64 {
        self.next_id.max(1)
    }

    /// Undelivered rows addressed to `receiver`, in id order.
    pub fn mailbox(&self, receiver: &str) -> impl Iterator<Item = &PendingRow> {
        self.mailboxes
            .get(receiver)
            .into_iter()
            .flatten()
            .map(|id| &self.rows[id].row)
    }

    /// Re-checks every stored origin signature; returns descriptions of the
    /// records that fail.
    pub fn audit_signatures(&self) -> Vec<String> {
        let mut failures = Vec::new();
        for (id, stored) in &self.rows {
            let row = &stored.row;
            let ok = self.users.get(&row.sender).is_some_and(|u| {
                verify_payload(
                    &row_origin_payload(&row.sender, &row.receiver, &row.encrypted_row),
                    &row.origin_sig,
                    &u.sig_public,
                )
            });
            if !ok {
                failures.push(format!("pending row {id}"));
            }
        }
        for ((id, receiver), rec) in &self.keys {
            let ok = self.users.get(&rec.sender).is_some_and(|u| {
                verify_payload(
                    &key_origin_payload(rec.id_row, &rec.sender, &rec.receiver, rec.expiry, &rec.wrapped_key),
                    &rec.origin_sig,
                    &u.sig_public,
                )
            });
            if !ok {
                failures.push(format!("key record ({id}, {receiver})"));
            }
        }
        failures
    }
}

struct Inner {
    state: SyncState,
    log: Option<OpLog>,
    sessions: HashMap<String, String>,
}

impl Inner {
    fn commit(&mut self, record: LogRecord) -> Result<(), ErrorBody> {
        if let Some(log) = self.log.as_mut() {
            log.append(&record)
                .map_err(|e| ErrorBody::new(ErrorCode::Internal, format!("log write failed: {e}")))?;
        }
        self.state.apply(record);
        Ok(())
    }
}

fn err(code: ErrorCode, message: impl Into<String>) -> ErrorBody {
    ErrorBody::new(code, message)
}

pub struct Synchronizer {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

impl Synchronizer {
    /// A synchronizer without persistence.
    pub fn in_memory() -> Self {
        Synchronizer {
            inner: Mutex::new(Inner {
                state: SyncState::default(),
                log: None,
                sessions: HashMap::new(),
            }),
            clock: Arc::new(SystemClock),
        }
    }

    /// Opens the log at `path`, replaying it into a fresh state. A missing or
    /// empty file gives an empty synchronizer.
    pub fn open(path: &Path) -> io::Result<Self> {
        let (log, records) = OpLog::open(path)?;
        let mut state = SyncState::default();
        for record in records {
            state.apply(record);
        }
        Ok(Synchronizer {
            inner: Mutex::new(Inner {
                state,
                log: Some(log),
                sessions: HashMap::new(),
            }),
            clock: Arc::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn snapshot(&self) -> SyncState {
        self.lock().state.clone()
    }

    pub fn audit_signatures(&self) -> Vec<String> {
        self.lock().state.audit_signatures()
    }

    /// Flushes and syncs the log.
    pub fn flush(&self) -> io::Result<()> {
        match self.lock().log.as_mut() {
            Some(log) => log.sync(),
            None => Ok(()),
        }
    }

    pub fn register_user(
        &self,
        user_id: &str,
        password: &str,
        enc_public: EncryptionPublicKey,
        sig_public: VerifyingPublicKey,
    ) -> Result<(), ErrorBody> {
        if user_id.is_empty() {
            return Err(err(ErrorCode::SchemaError, "empty user id"));
        }
        let mut inner = self.lock();
        if inner.state.users.contains_key(user_id) {
            return Err(err(ErrorCode::SchemaError, format!("user {user_id} already registered")));
        }
        let mut salt = vec![0u8; 16];
        OsRng.fill_bytes(&mut salt);
        let user = UserRecord {
            user_id: user_id.to_string(),
            auth_digest: password_digest(&salt, password),
            salt,
            enc_public,
            sig_public,
            registered_at: self.clock.now_ms(),
        };
        inner.commit(LogRecord::UserRegistered { user })
    }

    /// Checks a password and opens a session; returns its token.
    pub fn authenticate_user(&self, user_id: &str, password: &str) -> Result<String, ErrorBody> {
        let mut inner = self.lock();
        let ok = inner
            .state
            .users
            .get(user_id)
            .is_some_and(|u| bool::from(password_digest(&u.salt, password).ct_eq(&u.auth_digest)));
        if !ok {
            return Err(err(ErrorCode::AuthFailed, "unknown user or wrong password"));
        }
        let mut token = [0u8; 24];
        OsRng.fill_bytes(&mut token);
        let token = to_hex(&token);
        inner.sessions.insert(token.clone(), user_id.to_string());
        Ok(token)
    }

    /// The user a session token belongs to.
    pub fn session_user(&self, token: Option<&str>) -> Result<String, ErrorBody> {
        let inner = self.lock();
        token
            .and_then(|t| inner.sessions.get(t))
            .cloned()
            .ok_or_else(|| err(ErrorCode::AuthFailed, "missing or invalid session token"))
    }

    pub fn get_public_keys(&self, user_id: &str) -> Result<UserKeys, ErrorBody> {
        let inner = self.lock();
        let u = inner
            .state
            .users
            .get(user_id)
            .ok_or_else(|| err(ErrorCode::NotFound, format!("no user {user_id}")))?;
        Ok(UserKeys {
            user_id: u.user_id.clone(),
            enc_public: u.enc_public,
            sig_public: u.sig_public,
        })
    }

    pub fn get_all_users(&self) -> Vec<String> {
        self.lock().state.users.keys().cloned().collect()
    }

    pub fn deposit_key(&self, caller: &str, record: WrappedKeyRecord) -> Result<(), ErrorBody> {
        if record.sender != caller {
            return Err(err(ErrorCode::AuthFailed, "key records must be deposited by their sender"));
        }
        let mut inner = self.lock();
        if !inner.state.users.contains_key(&record.receiver) {
            return Err(err(ErrorCode::NotFound, format!("no user {}", record.receiver)));
        }
        let sender = inner
            .state
            .users
            .get(caller)
            .ok_or_else(|| err(ErrorCode::NotFound, format!("no user {caller}")))?;
        let payload = key_origin_payload(
            record.id_row,
            &record.sender,
            &record.receiver,
            record.expiry,
            &record.wrapped_key,
        );
        if !verify_payload(&payload, &record.origin_sig, &sender.sig_public) {
            return Err(err(ErrorCode::SignatureInvalid, "key record signature does not verify"));
        }
        inner.commit(LogRecord::KeyStored { record })
    }

    /// The caller's key record for a pending row, or `AFFIRMATIVELY_ABSENT`.
    pub fn get_decrypting_key(&self, caller: &str, id_pending_row: u64) -> Result<WrappedKeyRecord, ErrorBody> {
        let now = self.clock.now_ms();
        let inner = self.lock();
        match inner.state.keys.get(&(id_pending_row, caller.to_string())) {
            Some(rec) if rec.expiry.map_or(true, |t| t > now) => Ok(rec.clone()),
            _ => Err(err(
                ErrorCode::AffirmativelyAbsent,
                format!("no key for row {id_pending_row}"),
            )),
        }
    }

    pub fn delete_decrypting_key(&self, caller: &str, id_row: u64, receiver: &str) -> Result<(), ErrorBody> {
        let mut inner = self.lock();
        match inner.state.keys.get(&(id_row, receiver.to_string())) {
            None => Ok(()),
            Some(rec) if rec.sender != caller => Err(err(
                ErrorCode::AuthFailed,
                "only the sender may delete a key record",
            )),
            Some(_) => inner.commit(LogRecord::KeyDeleted {
                id_row,
                receiver: receiver.to_string(),
            }),
        }
    }

    pub fn send_row(
        &self,
        caller: &str,
        sender: &str,
        receiver: &str,
        encrypted_row: Vec<u8>,
        origin_sig: Signature,
    ) -> Result<u64, ErrorBody> {
        if sender != caller {
            return Err(err(ErrorCode::AuthFailed, "rows must be sent by their sender"));
        }
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        if !inner.state.users.contains_key(receiver) {
            return Err(err(ErrorCode::NotFound, format!("no user {receiver}")));
        }
        let sender_keys = inner
            .state
            .users
            .get(sender)
            .ok_or_else(|| err(ErrorCode::NotFound, format!("no user {sender}")))?;
        if !verify_payload(
            &row_origin_payload(sender, receiver, &encrypted_row),
            &origin_sig,
            &sender_keys.sig_public,
        ) {
            return Err(err(ErrorCode::SignatureInvalid, "pending row signature does not verify"));
        }
        let id = inner.state.next_id();
        inner.commit(LogRecord::RowStored {
            row: PendingRow {
                id_pending_row: id,
                sender: sender.to_string(),
                receiver: receiver.to_string(),
                submitted_at: now,
                encrypted_row,
                origin_sig,
            },
        })?;
        Ok(id)
    }

    /// One page of the caller's undelivered rows with id greater than `after_id`.
    pub fn get_pending_rows(&self, caller: &str, after_id: Option<u64>, limit: Option<u32>) -> Vec<PendingRow> {
        let limit = limit.map_or(PAGE_LIMIT, |l| (l as usize).min(PAGE_LIMIT)).max(1);
        let inner = self.lock();
        let Some(mailbox) = inner.state.mailboxes.get(caller) else {
            return Vec::new();
        };
        let start = after_id.map_or(0, |a| a.saturating_add(1));
        let mut out = Vec::new();
        let mut bytes = 0usize;
        for id in mailbox.range(start..) {
            let row = &inner.state.rows[id].row;
            let size = 2 * row.encrypted_row.len() + 2 * row.origin_sig.as_bytes().len() + 256;
            if !out.is_empty() && (out.len() >= limit || bytes + size > PAGE_BYTES) {
                break;
            }
            bytes += size;
            out.push(row.clone());
        }
        out
    }

    pub fn delete_pending_row(&self, caller: &str, id: u64) -> Result<(), ErrorBody> {
        let mut inner = self.lock();
        match inner.state.rows.get(&id) {
            None => Ok(()),
            Some(stored) if stored.row.receiver != caller => Err(err(
                ErrorCode::AuthFailed,
                "only the receiver may delete a pending row",
            )),
            Some(stored) if stored.delivered => Ok(()),
            Some(_) => inner.commit(LogRecord::RowDelivered { id }),
        }
    }

    /// Re-queues a previously sent row under a new id.
    pub fn resend_row(&self, caller: &str, id: u64) -> Result<u64, ErrorBody> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        let original = inner
            .state
            .rows
            .get(&id)
            .ok_or_else(|| err(ErrorCode::NotFound, format!("no pending row {id}")))?;
        if original.row.sender != caller {
            return Err(err(ErrorCode::AuthFailed, "only the sender may resend a row"));
        }
        let new_id = inner.state.next_id();
        let mut row = original.row.clone();
        row.id_pending_row = new_id;
        row.submitted_at = now;
        inner.commit(LogRecord::RowStored { row })?;
        Ok(new_id)
    }

    /// Executes one decoded request.
    pub fn handle(&self, env: RequestEnvelope) -> ResponseEnvelope {
        let result = self.dispatch(env.token.as_deref(), env.request);
        ResponseEnvelope { id: env.id, result }
    }

    fn dispatch(&self, token: Option<&str>, request: Request) -> Result<Response, ErrorBody> {
        let caller = if request.method().is_public() {
            String::new()
        } else {
            self.session_user(token)?
        };
        let done = |r: Result<(), ErrorBody>| r.map(|()| Response::empty());
        match request {
            Request::RegisterUser(r) => done(self.register_user(&r.user_id, &r.password, r.enc_public, r.sig_public)),
            Request::AuthenticateUser(r) => self
                .authenticate_user(&r.user_id, &r.password)
                .map(|token| Response::Token(wire::Token { token })),
            Request::GetPublicKeys(r) => self.get_public_keys(&r.user_id).map(Response::PublicKeys),
            Request::DepositKey(r) => done(self.deposit_key(&caller, r.record)),
            Request::GetDecryptingKey(r) => self
                .get_decrypting_key(&caller, r.id_pending_row)
                .map(|record| Response::KeyRecord(wire::KeyRecord { record })),
            Request::DeleteDecryptingKey(r) => done(self.delete_decrypting_key(&caller, r.id_row, &r.receiver)),
            Request::SendRow(r) => self
                .send_row(&caller, &r.sender, &r.receiver, r.encrypted_row, r.origin_sig)
                .map(|id_pending_row| Response::PendingId(wire::PendingId { id_pending_row })),
            Request::GetPendingRows(r) => Ok(Response::PendingRows(wire::PendingRows {
                rows: self.get_pending_rows(&caller, r.after_id, r.limit),
            })),
            Request::DeletePendingRow(r) => done(self.delete_pending_row(&caller, r.id_pending_row)),
            Request::ResendRow(r) => self
                .resend_row(&caller, r.id_pending_row)
                .map(|id_pending_row| Response::PendingId(wire::PendingId { id_pending_row })),
            Request::GetAllUsers(_) => Ok(Response::Users(wire::Users {
                users: self.get_all_users(),
            })),
        }
    }
}
