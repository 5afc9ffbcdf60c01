//! Cryptographic envelopes used by agents and the synchronizer.
//!
//! * Shared rows are sealed with AES-128-GCM under a per-row [`RowKey`]. The
//!   96-bit nonce is random and prepended to the ciphertext.
//! * Row keys are wrapped for a receiver with X25519 + HKDF-SHA256 +
//!   AES-128-GCM. A [`KeyWrapper`] keeps one ephemeral secret per receiver for
//!   the lifetime of the wrapper, and a [`KeyUnwrapper`] caches the derived
//!   key-encryption key per ephemeral public key, so bulk unwrapping costs one
//!   Diffie-Hellman per sender session instead of one per row.
//! * Origin signatures are Ed25519 over a domain-separated, length-prefixed
//!   encoding of the signed fields (see [`row_origin_payload`] and
//!   [`key_origin_payload`]).

use std::collections::HashMap;
use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};

/// Row keys are AES-128 keys.
pub const ROW_KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

const WRAP_VERSION: u8 = 1;
const WRAP_INFO: &[u8] = b"dossync/key-wrap/v1";
/// version || ephemeral public || nonce || sealed row key || tag
pub const WRAPPED_KEY_LEN: usize = 1 + PUBLIC_KEY_LEN + NONCE_LEN + ROW_KEY_LEN + TAG_LEN;

/// Ephemeral wrap secrets are rotated after this many wraps.
const EPHEMERAL_REUSE_LIMIT: u32 = 1 << 20;
const KEK_CACHE_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    Authentication,
    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },
    #[error("key agreement with a low-order public key")]
    NonContributory,
}

fn malformed(what: &'static str, reason: impl Into<String>) -> CryptoError {
    CryptoError::Malformed {
        what,
        reason: reason.into(),
    }
}

/// Uppercase hexadecimal, no separators.
pub fn to_hex(bytes: &[u8]) -> String {
    hex::encode_upper(bytes)
}

/// Parses uppercase hexadecimal. Lowercase digits are rejected so that every
/// byte string has exactly one accepted text form.
pub fn from_hex(text: &str) -> Result<Vec<u8>, CryptoError> {
    if let Some(bad) = text
        .bytes()
        .find(|b| !(b.is_ascii_digit() || (b'A'..=b'F').contains(b)))
    {
        return Err(malformed("hex", format!("invalid digit {:?}", bad as char)));
    }
    hex::decode(text).map_err(|e| malformed("hex", e.to_string()))
}

/// Symmetric key for one row version and one receiver.
#[derive(Clone, PartialEq, Eq)]
pub struct RowKey([u8; ROW_KEY_LEN]);

impl RowKey {
    pub fn generate() -> Self {
        let mut bytes = [0u8; ROW_KEY_LEN];
        OsRng.fill_bytes(&mut bytes);
        RowKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; ROW_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| malformed("row key", format!("expected {ROW_KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(RowKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; ROW_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RowKey(..)")
    }
}

pub fn generate_row_key() -> RowKey {
    RowKey::generate()
}

/// Seals `plaintext` under `key`. Output is `nonce || ciphertext || tag`.
pub fn encrypt_row(plaintext: &[u8], key: &RowKey) -> Vec<u8> {
    let cipher = Aes128Gcm::new(key.0.as_ref().into());
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("AES-GCM encryption of an in-memory buffer cannot fail");
    let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    out
}

pub fn decrypt_row(ciphertext: &[u8], key: &RowKey) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::Authentication);
    }
    let (nonce, sealed) = ciphertext.split_at(NONCE_LEN);
    Aes128Gcm::new(key.0.as_ref().into())
        .decrypt(Nonce::from_slice(nonce), sealed)
        .map_err(|_| CryptoError::Authentication)
}

macro_rules! public_key_type {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash)]
        pub struct $name([u8; PUBLIC_KEY_LEN]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                to_hex(&self.0)
            }

            pub fn from_hex(text: &str) -> Result<Self, CryptoError> {
                Self::from_slice(&from_hex(text)?)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = <std::borrow::Cow<'de, str>>::deserialize(d)?;
                Self::from_hex(&text).map_err(serde::de::Error::custom)
            }
        }
    };
}

public_key_type!(EncryptionPublicKey, "encryption public key");
public_key_type!(VerifyingPublicKey, "verification public key");

impl EncryptionPublicKey {
    /// Any 32 bytes are a valid X25519 point encoding; the all-zero encoding is
    /// rejected since it can never yield a contributory shared secret.
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| malformed("encryption public key", format!("expected 32 bytes, got {}", bytes.len())))?;
        if arr == [0u8; PUBLIC_KEY_LEN] {
            return Err(malformed("encryption public key", "all-zero point"));
        }
        Ok(EncryptionPublicKey(arr))
    }
}

impl VerifyingPublicKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| malformed("verification public key", format!("expected 32 bytes, got {}", bytes.len())))?;
        VerifyingKey::from_bytes(&arr)
            .map_err(|e| malformed("verification public key", e.to_string()))?;
        Ok(VerifyingPublicKey(arr))
    }
}

/// X25519 key pair used to receive wrapped row keys.
#[derive(Clone)]
pub struct EncryptionKeyPair {
    secret: StaticSecret,
    public: EncryptionPublicKey,
}

impl EncryptionKeyPair {
    pub fn generate() -> Self {
        Self::from_secret_bytes(random_32())
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = EncryptionPublicKey(XPublicKey::from(&secret).to_bytes());
        EncryptionKeyPair { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> EncryptionPublicKey {
        self.public
    }
}

impl fmt::Debug for EncryptionKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptionKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Ed25519 key pair used to sign pending rows and key records.
#[derive(Clone)]
pub struct SigningKeyPair {
    key: SigningKey,
}

impl SigningKeyPair {
    pub fn generate() -> Self {
        Self::from_secret_bytes(random_32())
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        SigningKeyPair {
            key: SigningKey::from_bytes(&bytes),
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn public(&self) -> VerifyingPublicKey {
        VerifyingPublicKey(self.key.verifying_key().to_bytes())
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

fn random_32() -> [u8; 32] {
    let mut bytes = [0u8; 32];
    OsRng.fill_bytes(&mut bytes);
    bytes
}

/// Detached signature bytes. Arbitrary lengths are representable so that a
/// malformed signature received over the wire simply fails verification.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Signature(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", to_hex(&self.0))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_hex(&self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        from_hex(&text).map(Signature).map_err(serde::de::Error::custom)
    }
}

pub fn sign_payload(payload: &[u8], signer: &SigningKeyPair) -> Signature {
    Signature(signer.key.sign(payload).to_bytes().to_vec())
}

pub fn verify_payload(payload: &[u8], signature: &Signature, signer: &VerifyingPublicKey) -> bool {
    let Ok(bytes) = <[u8; SIGNATURE_LEN]>::try_from(signature.as_bytes()) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&signer.0) else {
        return false;
    };
    key.verify(payload, &ed25519_dalek::Signature::from_bytes(&bytes))
        .is_ok()
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u64).to_be_bytes());
    out.extend_from_slice(field);
}

/// Bytes covered by a pending row's origin signature.
pub fn row_origin_payload(sender: &str, receiver: &str, encrypted_row: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + encrypted_row.len());
    put_field(&mut out, b"dossync/pending-row/v1");
    put_field(&mut out, sender.as_bytes());
    put_field(&mut out, receiver.as_bytes());
    put_field(&mut out, encrypted_row);
    out
}

/// Bytes covered by a wrapped-key record's origin signature. The pending-row
/// id and expiry are included so a record cannot be rebound to another row.
pub fn key_origin_payload(
    id_row: u64,
    sender: &str,
    receiver: &str,
    expiry: Option<u64>,
    wrapped_key: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + wrapped_key.len());
    put_field(&mut out, b"dossync/wrapped-key/v1");
    put_field(&mut out, &id_row.to_be_bytes());
    put_field(&mut out, sender.as_bytes());
    put_field(&mut out, receiver.as_bytes());
    match expiry {
        Some(t) => put_field(&mut out, &t.to_be_bytes()),
        None => put_field(&mut out, &[]),
    }
    put_field(&mut out, wrapped_key);
    out
}

fn derive_kek(
    shared: &x25519_dalek::SharedSecret,
    ephemeral: &[u8; PUBLIC_KEY_LEN],
    receiver: &[u8; PUBLIC_KEY_LEN],
) -> Result<Aes128Gcm, CryptoError> {
    if !shared.was_contributory() {
        return Err(CryptoError::NonContributory);
    }
    let mut info = Vec::with_capacity(WRAP_INFO.len() + 2 * PUBLIC_KEY_LEN);
    info.extend_from_slice(WRAP_INFO);
    info.extend_from_slice(ephemeral);
    info.extend_from_slice(receiver);
    let mut kek = [0u8; ROW_KEY_LEN];
    Hkdf::<Sha256>::new(None, shared.as_bytes())
        .expand(&info, &mut kek)
        .expect("16 bytes is a valid HKDF-SHA256 output length");
    Ok(Aes128Gcm::new(kek.as_ref().into()))
}

fn seal_key(
    kek: &Aes128Gcm,
    ephemeral: &[u8; PUBLIC_KEY_LEN],
    receiver: &[u8; PUBLIC_KEY_LEN],
    row_key: &RowKey,
) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let aad = [ephemeral.as_slice(), receiver.as_slice()].concat();
    let sealed = kek
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: row_key.as_bytes(),
                aad: &aad,
            },
        )
        .expect("AES-GCM encryption of an in-memory buffer cannot fail");
    let mut out = Vec::with_capacity(WRAPPED_KEY_LEN);
    out.push(WRAP_VERSION);
    out.extend_from_slice(ephemeral);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    out
}

/// Wraps `row_key` so that only the holder of `receiver`'s private key can
/// recover it. Uses a fresh ephemeral key for every call.
pub fn wrap_key(row_key: &RowKey, receiver: &EncryptionPublicKey) -> Result<Vec<u8>, CryptoError> {
    KeyWrapper::new().wrap(row_key, receiver)
}

pub fn unwrap_key(wrapped: &[u8], receiver: &EncryptionKeyPair) -> Result<RowKey, CryptoError> {
    let parts = split_wrapped(wrapped)?;
    let shared = receiver.secret.diffie_hellman(&XPublicKey::from(parts.ephemeral));
    let kek = derive_kek(&shared, &parts.ephemeral, receiver.public.as_bytes())
        .map_err(|_| CryptoError::Authentication)?;
    open_key(&kek, &parts, receiver.public.as_bytes())
}

struct WrappedParts<'a> {
    ephemeral: [u8; PUBLIC_KEY_LEN],
    nonce: &'a [u8],
    sealed: &'a [u8],
}

fn split_wrapped(wrapped: &[u8]) -> Result<WrappedParts<'_>, CryptoError> {
    if wrapped.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::Authentication);
    }
    if wrapped[0] != WRAP_VERSION {
        return Err(CryptoError::Authentication);
    }
    let ephemeral: [u8; PUBLIC_KEY_LEN] = wrapped[1..1 + PUBLIC_KEY_LEN].try_into().unwrap();
    let rest = &wrapped[1 + PUBLIC_KEY_LEN..];
    let (nonce, sealed) = rest.split_at(NONCE_LEN);
    Ok(WrappedParts {
        ephemeral,
        nonce,
        sealed,
    })
}

fn open_key(
    kek: &Aes128Gcm,
    parts: &WrappedParts<'_>,
    receiver: &[u8; PUBLIC_KEY_LEN],
) -> Result<RowKey, CryptoError> {
    let aad = [parts.ephemeral.as_slice(), receiver.as_slice()].concat();
    let plain = kek
        .decrypt(
            Nonce::from_slice(parts.nonce),
            Payload {
                msg: parts.sealed,
                aad: &aad,
            },
        )
        .map_err(|_| CryptoError::Authentication)?;
    RowKey::from_slice(&plain).map_err(|_| CryptoError::Authentication)
}

struct WrapSession {
    ephemeral_public: [u8; PUBLIC_KEY_LEN],
    kek: Aes128Gcm,
    uses: u32,
}

/// Wraps row keys for many receivers, reusing one ephemeral secret per
/// receiver until [`EPHEMERAL_REUSE_LIMIT`] wraps.
#[derive(Default)]
pub struct KeyWrapper {
    sessions: HashMap<EncryptionPublicKey, WrapSession>,
}

impl KeyWrapper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wrap(&mut self, row_key: &RowKey, receiver: &EncryptionPublicKey) -> Result<Vec<u8>, CryptoError> {
        let session = match self.sessions.get_mut(receiver) {
            Some(s) if s.uses < EPHEMERAL_REUSE_LIMIT => s,
            _ => {
                let ephemeral = StaticSecret::from(random_32());
                let ephemeral_public = XPublicKey::from(&ephemeral).to_bytes();
                let shared = ephemeral.diffie_hellman(&XPublicKey::from(*receiver.as_bytes()));
                let kek = derive_kek(&shared, &ephemeral_public, receiver.as_bytes())?;
                self.sessions.insert(
                    *receiver,
                    WrapSession {
                        ephemeral_public,
                        kek,
                        uses: 0,
                    },
                );
                self.sessions.get_mut(receiver).unwrap()
            }
        };
        session.uses += 1;
        Ok(seal_key(&session.kek, &session.ephemeral_public, receiver.as_bytes(), row_key))
    }
}

/// Unwraps row keys addressed to one receiver, caching the derived
/// key-encryption key per sender ephemeral.
pub struct KeyUnwrapper {
    pair: EncryptionKeyPair,
    keks: HashMap<[u8; PUBLIC_KEY_LEN], Aes128Gcm>,
}

impl KeyUnwrapper {
    pub fn new(pair: EncryptionKeyPair) -> Self {
        KeyUnwrapper {
            pair,
            keks: HashMap::new(),
        }
    }

    pub fn unwrap(&mut self, wrapped: &[u8]) -> Result<RowKey, CryptoError> {
        let parts = split_wrapped(wrapped)?;
        let receiver = *self.pair.public.as_bytes();
        if !self.keks.contains_key(&parts.ephemeral) {
            let shared = self
                .pair
                .secret
                .diffie_hellman(&XPublicKey::from(parts.ephemeral));
            let kek = derive_kek(&shared, &parts.ephemeral, &receiver)
                .map_err(|_| CryptoError::Authentication)?;
            if self.keks.len() >= KEK_CACHE_LIMIT {
                self.keks.clear();
            }
            self.keks.insert(parts.ephemeral, kek);
        }
        open_key(&self.keks[&parts.ephemeral], &parts, &receiver)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn row_key_is_sixteen_nonzero_bytes() {
        let key = generate_row_key();
        assert_eq!(key.as_bytes().len(), ROW_KEY_LEN);
        assert_ne!(key.as_bytes(), &[0u8; ROW_KEY_LEN]);
    }

    #[test]
    fn thousand_row_keys_are_distinct() {
        let keys: HashSet<[u8; ROW_KEY_LEN]> = (0..1000).map(|_| *generate_row_key().as_bytes()).collect();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn empty_payload_round_trips() {
        let key = generate_row_key();
        let sealed = encrypt_row(b"", &key);
        assert_eq!(sealed.len(), NONCE_LEN + TAG_LEN);
        assert_eq!(decrypt_row(&sealed, &key).unwrap(), b"");
    }

    #[test]
    fn fixed_payload_round_trips_and_nonce_is_fresh() {
        let key = RowKey::from_slice(&[7u8; 16]).unwrap();
        let payload: Vec<u8> = (0..200u32).map(|i| (i * 31 % 251) as u8).collect();
        let a = encrypt_row(&payload, &key);
        let b = encrypt_row(&payload, &key);
        assert_ne!(a, b);
        assert_eq!(decrypt_row(&a, &key).unwrap(), payload);
        assert_eq!(decrypt_row(&b, &key).unwrap(), payload);
    }

    #[test]
    fn wrong_key_and_tamper_fail_authentication() {
        let key = generate_row_key();
        let other = generate_row_key();
        let mut sealed = encrypt_row(b"INSERT INTO students(id,name) VALUES(12,'Alice');", &key);
        assert_eq!(decrypt_row(&sealed, &other), Err(CryptoError::Authentication));
        sealed[20] ^= 0x01;
        assert_eq!(decrypt_row(&sealed, &key), Err(CryptoError::Authentication));
        assert_eq!(decrypt_row(&[1, 2, 3], &key), Err(CryptoError::Authentication));
    }

    #[test]
    fn wrap_unwrap_matching_and_mismatched() {
        let alice = EncryptionKeyPair::generate();
        let bob = EncryptionKeyPair::generate();
        let key = generate_row_key();
        let for_alice = wrap_key(&key, &alice.public()).unwrap();
        let for_bob = wrap_key(&key, &bob.public()).unwrap();
        assert_ne!(for_alice, for_bob);
        assert_eq!(unwrap_key(&for_alice, &alice).unwrap(), key);
        assert_eq!(unwrap_key(&for_alice, &bob), Err(CryptoError::Authentication));
        assert_eq!(unwrap_key(&for_bob, &bob).unwrap(), key);
    }

    #[test]
    fn session_wrapper_and_caching_unwrapper_agree_with_free_functions() {
        let bob = EncryptionKeyPair::generate();
        let mut wrapper = KeyWrapper::new();
        let mut unwrapper = KeyUnwrapper::new(bob.clone());
        for _ in 0..20 {
            let key = generate_row_key();
            let wrapped = wrapper.wrap(&key, &bob.public()).unwrap();
            assert_eq!(unwrap_key(&wrapped, &bob).unwrap(), key);
            assert_eq!(unwrapper.unwrap(&wrapped).unwrap(), key);
        }
        assert_eq!(unwrapper.keks.len(), 1);
    }

    #[test]
    fn malformed_public_keys_are_rejected() {
        assert!(EncryptionPublicKey::from_slice(&[0u8; 32]).is_err());
        assert!(EncryptionPublicKey::from_slice(&[1u8; 31]).is_err());
        assert!(VerifyingPublicKey::from_slice(&[1u8; 33]).is_err());
        assert!(EncryptionPublicKey::from_hex("zz").is_err());
    }

    #[test]
    fn sign_verify() {
        let alice = SigningKeyPair::generate();
        let bob = SigningKeyPair::generate();
        let mut payload = row_origin_payload("alice", "bob", b"ciphertext");
        let sig = sign_payload(&payload, &alice);
        assert!(verify_payload(&payload, &sig, &alice.public()));
        assert!(!verify_payload(&payload, &sig, &bob.public()));
        payload[3] ^= 0x80;
        assert!(!verify_payload(&payload, &sig, &alice.public()));
        assert!(!verify_payload(b"x", &Signature::from_bytes(vec![1, 2, 3]), &alice.public()));
    }

    #[test]
    fn origin_payload_fields_are_unambiguous() {
        assert_ne!(row_origin_payload("ab", "c", b""), row_origin_payload("a", "bc", b""));
        assert_ne!(
            key_origin_payload(1, "a", "b", None, b"k"),
            key_origin_payload(2, "a", "b", None, b"k")
        );
        assert_ne!(
            key_origin_payload(1, "a", "b", None, b"k"),
            key_origin_payload(1, "a", "b", Some(0), b"k")
        );
    }

    #[test]
    fn hex_is_uppercase_and_strict() {
        assert_eq!(to_hex(&[0x5d, 0xaa, 0x0f]), "5DAA0F");
        assert_eq!(from_hex("5DAA0F").unwrap(), vec![0x5d, 0xaa, 0x0f]);
        assert!(from_hex("5daa0f").is_err());
        assert!(from_hex("ABC").is_err());
    }
}
