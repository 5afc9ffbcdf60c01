//! Request/response schema and framing between agents and the synchronizer.
//!
//! Every message is a frame: a 4-byte big-endian body length followed by a
//! UTF-8 JSON body of at most [`MAX_FRAME`] bytes. Requests look like
//!
//! ```text
//! {"id":7,"method":"syn.sendRow","token":"9F…","payload":{…}}
//! ```
//!
//! and responses mirror the request id with either `ok` or `error`:
//!
//! ```text
//! {"id":7,"ok":{"id_pending_row":27}}
//! {"id":8,"error":{"code":"AFFIRMATIVELY_ABSENT","message":"no key for row 27"}}
//! ```
//!
//! Field order is fixed by the record definitions, so encoding is
//! deterministic. Binary fields travel as uppercase hex.

use std::fmt;
use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::crypto::{EncryptionPublicKey, Signature, VerifyingPublicKey};

pub const MAX_FRAME: usize = 1 << 20;
pub const HEADER_LEN: usize = 4;

pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::crypto::to_hex(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        crate::crypto::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    AuthFailed,
    NotFound,
    AffirmativelyAbsent,
    SignatureInvalid,
    MethodUnknown,
    SchemaError,
    FrameTooLarge,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 8] = [
        ErrorCode::AuthFailed,
        ErrorCode::NotFound,
        ErrorCode::AffirmativelyAbsent,
        ErrorCode::SignatureInvalid,
        ErrorCode::MethodUnknown,
        ErrorCode::SchemaError,
        ErrorCode::FrameTooLarge,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::AuthFailed => "AUTH_FAILED",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::AffirmativelyAbsent => "AFFIRMATIVELY_ABSENT",
            ErrorCode::SignatureInvalid => "SIGNATURE_INVALID",
            ErrorCode::MethodUnknown => "METHOD_UNKNOWN",
            ErrorCode::SchemaError => "SCHEMA_ERROR",
            ErrorCode::FrameTooLarge => "FRAME_TOO_LARGE",
            ErrorCode::Internal => "INTERNAL",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ErrorBody {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    RegisterUser,
    AuthenticateUser,
    GetPublicKeys,
    DepositKey,
    GetDecryptingKey,
    DeleteDecryptingKey,
    SendRow,
    GetPendingRows,
    DeletePendingRow,
    ResendRow,
    GetAllUsers,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::RegisterUser,
        Method::AuthenticateUser,
        Method::GetPublicKeys,
        Method::DepositKey,
        Method::GetDecryptingKey,
        Method::DeleteDecryptingKey,
        Method::SendRow,
        Method::GetPendingRows,
        Method::DeletePendingRow,
        Method::ResendRow,
        Method::GetAllUsers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::RegisterUser => "reg.registerUser",
            Method::AuthenticateUser => "reg.selectUserByIdAndPassword",
            Method::GetPublicKeys => "key.getPublicKeyByUser",
            Method::DepositKey => "key.depositKey",
            Method::GetDecryptingKey => "key.getDecryptingKeyByIdPendingRow",
            Method::DeleteDecryptingKey => "key.deleteDecryptingKey",
            Method::SendRow => "syn.sendRow",
            Method::GetPendingRows => "syn.getPendingRowForUser",
            Method::DeletePendingRow => "syn.deletePendingRow",
            Method::ResendRow => "syn.resendRow",
            Method::GetAllUsers => "syn.getAllUsers",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == name)
    }

    /// Methods callable without a session token.
    pub fn is_public(self) -> bool {
        matches!(
            self,
            Method::RegisterUser | Method::AuthenticateUser | Method::GetPublicKeys | Method::GetAllUsers
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Public directory entry; carries no secret material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserKeys {
    pub user_id: String,
    pub enc_public: EncryptionPublicKey,
    pub sig_public: VerifyingPublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendingRow {
    pub id_pending_row: u64,
    pub sender: String,
    pub receiver: String,
    pub submitted_at: u64,
    #[serde(with = "hex_bytes")]
    pub encrypted_row: Vec<u8>,
    pub origin_sig: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrappedKeyRecord {
    pub id_row: u64,
    pub sender: String,
    pub receiver: String,
    pub expiry: Option<u64>,
    #[serde(with = "hex_bytes")]
    pub wrapped_key: Vec<u8>,
    pub origin_sig: Signature,
}

macro_rules! payload {
    ($(#[$m:meta])* $name:ident { $($field:ident : $ty:ty $(=> $with:literal)?),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name { $( $(#[serde(with = $with)])? pub $field: $ty ),* }
    };
}

payload!(RegisterUser { user_id: String, password: String, enc_public: EncryptionPublicKey, sig_public: VerifyingPublicKey });
payload!(AuthenticateUser { user_id: String, password: String });
payload!(GetPublicKeys { user_id: String });
payload!(DepositKey { record: WrappedKeyRecord });
payload!(GetDecryptingKey { id_pending_row: u64 });
payload!(DeleteDecryptingKey { id_row: u64, receiver: String });
payload!(SendRow { sender: String, receiver: String, encrypted_row: Vec<u8> => "hex_bytes", origin_sig: Signature });
payload!(
    /// Rows with id greater than `after_id`, at most `limit` of them. The
    /// service also stops early to keep the response under the frame limit.
    GetPendingRows { after_id: Option<u64>, limit: Option<u32> }
);
payload!(DeletePendingRow { id_pending_row: u64 });
payload!(ResendRow { id_pending_row: u64 });
payload!(GetAllUsers {});

payload!(Empty {});
payload!(Token { token: String });
payload!(KeyRecord { record: WrappedKeyRecord });
payload!(PendingId { id_pending_row: u64 });
payload!(PendingRows { rows: Vec<PendingRow> });
payload!(Users { users: Vec<String> });

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Request {
    RegisterUser(RegisterUser),
    AuthenticateUser(AuthenticateUser),
    GetPublicKeys(GetPublicKeys),
    DepositKey(DepositKey),
    GetDecryptingKey(GetDecryptingKey),
    DeleteDecryptingKey(DeleteDecryptingKey),
    SendRow(SendRow),
    GetPendingRows(GetPendingRows),
    DeletePendingRow(DeletePendingRow),
    ResendRow(ResendRow),
    GetAllUsers(GetAllUsers),
}

impl Request {
    pub fn method(&self) -> Method {
        match self {
            Request::RegisterUser(_) => Method::RegisterUser,
            Request::AuthenticateUser(_) => Method::AuthenticateUser,
            Request::GetPublicKeys(_) => Method::GetPublicKeys,
            Request::DepositKey(_) => Method::DepositKey,
            Request::GetDecryptingKey(_) => Method::GetDecryptingKey,
            Request::DeleteDecryptingKey(_) => Method::DeleteDecryptingKey,
            Request::SendRow(_) => Method::SendRow,
            Request::GetPendingRows(_) => Method::GetPendingRows,
            Request::DeletePendingRow(_) => Method::DeletePendingRow,
            Request::ResendRow(_) => Method::ResendRow,
            Request::GetAllUsers(_) => Method::GetAllUsers,
        }
    }

    fn from_payload(method: Method, payload: &str) -> serde_json::Result<Request> {
        Ok(match method {
            Method::RegisterUser => Request::RegisterUser(serde_json::from_str(payload)?),
            Method::AuthenticateUser => Request::AuthenticateUser(serde_json::from_str(payload)?),
            Method::GetPublicKeys => Request::GetPublicKeys(serde_json::from_str(payload)?),
            Method::DepositKey => Request::DepositKey(serde_json::from_str(payload)?),
            Method::GetDecryptingKey => Request::GetDecryptingKey(serde_json::from_str(payload)?),
            Method::DeleteDecryptingKey => Request::DeleteDecryptingKey(serde_json::from_str(payload)?),
            Method::SendRow => Request::SendRow(serde_json::from_str(payload)?),
            Method::GetPendingRows => Request::GetPendingRows(serde_json::from_str(payload)?),
            Method::DeletePendingRow => Request::DeletePendingRow(serde_json::from_str(payload)?),
            Method::ResendRow => Request::ResendRow(serde_json::from_str(payload)?),
            Method::GetAllUsers => Request::GetAllUsers(serde_json::from_str(payload)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Response {
    Empty(Empty),
    Token(Token),
    PublicKeys(UserKeys),
    KeyRecord(KeyRecord),
    PendingId(PendingId),
    PendingRows(PendingRows),
    Users(Users),
}

impl Response {
    pub fn empty() -> Self {
        Response::Empty(Empty {})
    }

    fn from_payload(method: Method, payload: &str) -> serde_json::Result<Response> {
        fn parse<T: DeserializeOwned>(p: &str) -> serde_json::Result<T> {
            serde_json::from_str(p)
        }
        Ok(match method {
            Method::RegisterUser | Method::DepositKey | Method::DeleteDecryptingKey | Method::DeletePendingRow => {
                Response::Empty(parse(payload)?)
            }
            Method::AuthenticateUser => Response::Token(parse(payload)?),
            Method::GetPublicKeys => Response::PublicKeys(parse(payload)?),
            Method::GetDecryptingKey => Response::KeyRecord(parse(payload)?),
            Method::SendRow | Method::ResendRow => Response::PendingId(parse(payload)?),
            Method::GetPendingRows => Response::PendingRows(parse(payload)?),
            Method::GetAllUsers => Response::Users(parse(payload)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestEnvelope {
    pub id: u64,
    pub token: Option<String>,
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseEnvelope {
    pub id: u64,
    pub result: Result<Response, ErrorBody>,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("incomplete frame: {needed} more bytes needed")]
    Incomplete { needed: usize },
    #[error("frame of {len} bytes exceeds the {MAX_FRAME}-byte limit")]
    FrameTooLarge { len: usize },
    #[error("unknown method {method:?}")]
    MethodUnknown { id: u64, method: String },
    #[error("schema error: {message}")]
    Schema { id: Option<u64>, message: String },
}

impl WireError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::FrameTooLarge { .. } => ErrorCode::FrameTooLarge,
            WireError::MethodUnknown { .. } => ErrorCode::MethodUnknown,
            WireError::Incomplete { .. } | WireError::Schema { .. } => ErrorCode::SchemaError,
        }
    }

    /// Request id the error can be reported against, when one was parsed.
    pub fn request_id(&self) -> Option<u64> {
        match self {
            WireError::MethodUnknown { id, .. } => Some(*id),
            WireError::Schema { id, .. } => *id,
            _ => None,
        }
    }
}

fn schema(id: Option<u64>, e: impl fmt::Display) -> WireError {
    WireError::Schema {
        id,
        message: e.to_string(),
    }
}

#[derive(Serialize)]
struct RequestOut<'a> {
    id: u64,
    method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    token: Option<&'a str>,
    payload: &'a Request,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestIn<'a> {
    id: u64,
    method: String,
    #[serde(default)]
    token: Option<String>,
    #[serde(borrow)]
    payload: &'a RawValue,
}

#[derive(Serialize)]
struct ResponseOut<'a> {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ok: Option<&'a Response>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a ErrorBody>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseIn<'a> {
    id: u64,
    #[serde(borrow, default)]
    ok: Option<&'a RawValue>,
    #[serde(default)]
    error: Option<ErrorBody>,
}

fn frame(body: Vec<u8>) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_FRAME {
        return Err(WireError::FrameTooLarge { len: body.len() });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Splits one frame off the front of `buf`, returning its body and the total
/// number of bytes consumed.
pub fn split_frame(buf: &[u8]) -> Result<(&[u8], usize), WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - buf.len(),
        });
    }
    let len = u32::from_be_bytes(buf[..HEADER_LEN].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLarge { len });
    }
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Err(WireError::Incomplete {
            needed: total - buf.len(),
        });
    }
    Ok((&buf[HEADER_LEN..total], total))
}

pub fn encode_request_body(env: &RequestEnvelope) -> Vec<u8> {
    serde_json::to_vec(&RequestOut {
        id: env.id,
        method: env.request.method().as_str(),
        token: env.token.as_deref(),
        payload: &env.request,
    })
    .expect("request records always serialize")
}

pub fn encode_request(env: &RequestEnvelope) -> Result<Vec<u8>, WireError> {
    frame(encode_request_body(env))
}

pub fn decode_request_body(body: &[u8]) -> Result<RequestEnvelope, WireError> {
    let raw: RequestIn<'_> = serde_json::from_slice(body).map_err(|e| {
        // Recover the id for the error response when the envelope is mostly intact.
        #[derive(Deserialize)]
        struct IdOnly {
            id: u64,
        }
        schema(serde_json::from_slice::<IdOnly>(body).ok().map(|x| x.id), e)
    })?;
    let method = Method::parse(&raw.method).ok_or_else(|| WireError::MethodUnknown {
        id: raw.id,
        method: raw.method.clone(),
    })?;
    let request = Request::from_payload(method, raw.payload.get()).map_err(|e| schema(Some(raw.id), e))?;
    Ok(RequestEnvelope {
        id: raw.id,
        token: raw.token,
        request,
    })
}

pub fn decode_request(buf: &[u8]) -> Result<(RequestEnvelope, usize), WireError> {
    let (body, used) = split_frame(buf)?;
    Ok((decode_request_body(body)?, used))
}

pub fn encode_response_body(env: &ResponseEnvelope) -> Vec<u8> {
    let (ok, error) = match &env.result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    serde_json::to_vec(&ResponseOut { id: env.id, ok, error }).expect("response records always serialize")
}

pub fn encode_response(env: &ResponseEnvelope) -> Result<Vec<u8>, WireError> {
    frame(encode_response_body(env))
}

/// Decodes a response body; `method` is the method of the matching request.
pub fn decode_response_body(body: &[u8], method: Method) -> Result<ResponseEnvelope, WireError> {
    let raw: ResponseIn<'_> = serde_json::from_slice(body).map_err(|e| schema(None, e))?;
    let result = match (raw.ok, raw.error) {
        (Some(ok), None) => Ok(Response::from_payload(method, ok.get()).map_err(|e| schema(Some(raw.id), e))?),
        (None, Some(err)) => Err(err),
        _ => return Err(schema(Some(raw.id), "response needs exactly one of ok/error")),
    };
    Ok(ResponseEnvelope { id: raw.id, result })
}

pub fn decode_response(buf: &[u8], method: Method) -> Result<(ResponseEnvelope, usize), WireError> {
    let (body, used) = split_frame(buf)?;
    Ok((decode_response_body(body, method)?, used))
}

/// Result of reading one frame from a stream.
#[derive(Debug)]
pub enum FrameRead {
    Body(Vec<u8>),
    /// The peer announced an oversized frame; its body was discarded.
    TooLarge(usize),
    /// Clean end of stream at a frame boundary.
    Eof,
}

pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<FrameRead> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(FrameRead::Eof),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        io::copy(&mut reader.take(len as u64), &mut io::sink())?;
        return Ok(FrameRead::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(FrameRead::Body(body))
}

pub fn write_frame<W: Write>(writer: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds MAX_FRAME"));
    }
    writer.write_all(&(body.len() as u32).to_be_bytes())?;
    writer.write_all(body)
}
