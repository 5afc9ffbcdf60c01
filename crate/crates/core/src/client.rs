//! Blocking client for the synchronizer protocol.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use crate::crypto::{EncryptionPublicKey, Signature, VerifyingPublicKey};
use crate::wire::{
    self, DeleteDecryptingKey, DeletePendingRow, DepositKey, ErrorBody, ErrorCode, FrameRead, GetAllUsers,
    GetDecryptingKey, GetPendingRows, GetPublicKeys, PendingRow, RegisterUser, Request, RequestEnvelope,
    ResendRow, Response, SendRow, UserKeys, WrappedKeyRecord,
};

/// Requests in flight per pipelined batch.
const WINDOW: usize = 256;
/// Request bytes in flight per pipelined batch.
const WINDOW_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("{}: {}", .0.code.as_str(), .0.message)]
    Remote(ErrorBody),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ClientError {
    /// The taxonomy code closest to this failure.
    pub fn code(&self) -> ErrorCode {
        match self {
            ClientError::Remote(body) => body.code,
            ClientError::Transport(_) => ErrorCode::Internal,
            ClientError::Protocol(_) => ErrorCode::SchemaError,
        }
    }
}

impl From<wire::WireError> for ClientError {
    fn from(e: wire::WireError) -> Self {
        ClientError::Protocol(e.to_string())
    }
}

pub struct SyncClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
    token: Option<String>,
}

impl SyncClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(SyncClient {
            reader: BufReader::with_capacity(64 * 1024, stream.try_clone()?),
            writer: BufWriter::with_capacity(64 * 1024, stream),
            next_id: 1,
            token: None,
        })
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn write_request(&mut self, request: Request) -> Result<(u64, wire::Method, usize), ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        let method = request.method();
        let body = wire::encode_request_body(&RequestEnvelope {
            id,
            token: self.token.clone(),
            request,
        });
        if body.len() > wire::MAX_FRAME {
            return Err(ClientError::Remote(ErrorBody::new(
                ErrorCode::FrameTooLarge,
                format!("request of {} bytes exceeds the frame limit", body.len()),
            )));
        }
        wire::write_frame(&mut self.writer, &body)?;
        Ok((id, method, body.len()))
    }

    fn read_response(&mut self, id: u64, method: wire::Method) -> Result<Result<Response, ErrorBody>, ClientError> {
        let body = match wire::read_frame(&mut self.reader)? {
            FrameRead::Body(b) => b,
            FrameRead::TooLarge(len) => {
                return Err(ClientError::Protocol(format!("response frame of {len} bytes")))
            }
            FrameRead::Eof => {
                return Err(ClientError::Transport(io::ErrorKind::UnexpectedEof.into()))
            }
        };
        let env = wire::decode_response_body(&body, method)?;
        if env.id != id {
            return Err(ClientError::Protocol(format!(
                "response id {} does not match request {id}",
                env.id
            )));
        }
        Ok(env.result)
    }

    /// Sends one request and waits for its answer.
    pub fn call(&mut self, request: Request) -> Result<Response, ClientError> {
        let (id, method, _) = self.write_request(request)?;
        self.writer.flush()?;
        self.read_response(id, method)?.map_err(ClientError::Remote)
    }

    /// Sends requests pipelined and returns one result per request, in order.
    /// Remote errors are per request; transport or protocol errors abort the batch.
    pub fn call_many(&mut self, requests: Vec<Request>) -> Result<Vec<Result<Response, ErrorBody>>, ClientError> {
        let mut out = Vec::with_capacity(requests.len());
        let mut iter = requests.into_iter().peekable();
        let mut inflight = Vec::with_capacity(WINDOW);
        while iter.peek().is_some() {
            let mut bytes = 0;
            while inflight.len() < WINDOW && bytes < WINDOW_BYTES {
                let Some(req) = iter.next() else { break };
                let (id, method, len) = self.write_request(req)?;
                bytes += len;
                inflight.push((id, method));
            }
            self.writer.flush()?;
            for (id, method) in inflight.drain(..) {
                out.push(self.read_response(id, method)?);
            }
        }
        Ok(out)
    }

    pub fn register_user(
        &mut self,
        user_id: &str,
        password: &str,
        enc_public: EncryptionPublicKey,
        sig_public: VerifyingPublicKey,
    ) -> Result<(), ClientError> {
        self.call(Request::RegisterUser(RegisterUser {
            user_id: user_id.into(),
            password: password.into(),
            enc_public,
            sig_public,
        }))
        .map(drop)
    }

    /// Authenticates and keeps the session token for later calls.
    pub fn login(&mut self, user_id: &str, password: &str) -> Result<(), ClientError> {
        match self.call(Request::AuthenticateUser(wire::AuthenticateUser {
            user_id: user_id.into(),
            password: password.into(),
        }))? {
            Response::Token(t) => {
                self.token = Some(t.token);
                Ok(())
            }
            other => Err(unexpected(other)),
        }
    }

    pub fn public_keys(&mut self, user_id: &str) -> Result<UserKeys, ClientError> {
        match self.call(Request::GetPublicKeys(GetPublicKeys { user_id: user_id.into() }))? {
            Response::PublicKeys(k) => Ok(k),
            other => Err(unexpected(other)),
        }
    }

    pub fn all_users(&mut self) -> Result<Vec<String>, ClientError> {
        match self.call(Request::GetAllUsers(GetAllUsers {}))? {
            Response::Users(u) => Ok(u.users),
            other => Err(unexpected(other)),
        }
    }

    pub fn deposit_key(&mut self, record: WrappedKeyRecord) -> Result<(), ClientError> {
        self.call(Request::DepositKey(DepositKey { record })).map(drop)
    }

    /// `None` when the synchronizer affirms that no key exists.
    pub fn decrypting_key(&mut self, id_pending_row: u64) -> Result<Option<WrappedKeyRecord>, ClientError> {
        key_result(self.call(Request::GetDecryptingKey(GetDecryptingKey { id_pending_row })))
    }

    /// Pipelined form of [`decrypting_key`](Self::decrypting_key).
    pub fn decrypting_keys(&mut self, ids: &[u64]) -> Result<Vec<Result<Option<WrappedKeyRecord>, ClientError>>, ClientError> {
        let requests = ids
            .iter()
            .map(|&id_pending_row| Request::GetDecryptingKey(GetDecryptingKey { id_pending_row }))
            .collect();
        Ok(self
            .call_many(requests)?
            .into_iter()
            .map(|r| key_result(r.map_err(ClientError::Remote)))
            .collect())
    }

    pub fn delete_key(&mut self, id_row: u64, receiver: &str) -> Result<(), ClientError> {
        self.call(Request::DeleteDecryptingKey(DeleteDecryptingKey {
            id_row,
            receiver: receiver.into(),
        }))
        .map(drop)
    }

    pub fn send_row(
        &mut self,
        sender: &str,
        receiver: &str,
        encrypted_row: Vec<u8>,
        origin_sig: Signature,
    ) -> Result<u64, ClientError> {
        pending_id(self.call(Request::SendRow(SendRow {
            sender: sender.into(),
            receiver: receiver.into(),
            encrypted_row,
            origin_sig,
        }))?)
    }

    pub fn pending_rows(&mut self, after_id: Option<u64>, limit: Option<u32>) -> Result<Vec<PendingRow>, ClientError> {
        match self.call(Request::GetPendingRows(GetPendingRows { after_id, limit }))? {
            Response::PendingRows(p) => Ok(p.rows),
            other => Err(unexpected(other)),
        }
    }

    /// Every undelivered row, fetched page by page.
    pub fn all_pending_rows(&mut self) -> Result<Vec<PendingRow>, ClientError> {
        let mut rows: Vec<PendingRow> = Vec::new();
        loop {
            let page = self.pending_rows(rows.last().map(|r| r.id_pending_row), None)?;
            if page.is_empty() {
                return Ok(rows);
            }
            rows.extend(page);
        }
    }

    pub fn delete_pending_row(&mut self, id_pending_row: u64) -> Result<(), ClientError> {
        self.call(Request::DeletePendingRow(DeletePendingRow { id_pending_row }))
            .map(drop)
    }

    pub fn resend_row(&mut self, id_pending_row: u64) -> Result<u64, ClientError> {
        pending_id(self.call(Request::ResendRow(ResendRow { id_pending_row }))?)
    }
}

fn unexpected(r: Response) -> ClientError {
    ClientError::Protocol(format!("unexpected response {r:?}"))
}

fn pending_id(r: Response) -> Result<u64, ClientError> {
    match r {
        Response::PendingId(p) => Ok(p.id_pending_row),
        other => Err(unexpected(other)),
    }
}

fn key_result(r: Result<Response, ClientError>) -> Result<Option<WrappedKeyRecord>, ClientError> {
    match r {
        Ok(Response::KeyRecord(k)) => Ok(Some(k.record)),
        Ok(other) => Err(unexpected(other)),
        Err(ClientError::Remote(e)) if e.code == ErrorCode::AffirmativelyAbsent => Ok(None),
        Err(e) => Err(e),
    }
}
