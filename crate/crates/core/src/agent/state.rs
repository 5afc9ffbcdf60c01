//! On-disk agent files: the identity (the only place private keys live) and
//! the agent state (access lists, delivery history, retry queue, policy).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crypto::{EncryptionKeyPair, RowKey, SigningKeyPair};
use crate::fsutil;
use crate::store::{RevokedPolicy, Value};
use crate::wire::hex_bytes;

/// A dossier: one row of one table, named by its primary key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DossierRef {
    pub table: String,
    pub pk: Value,
}

impl DossierRef {
    pub fn new(table: impl Into<String>, pk: impl Into<Value>) -> Self {
        DossierRef {
            table: table.into(),
            pk: pk.into(),
        }
    }
}

pub struct Identity {
    pub user_id: String,
    pub password: String,
    pub enc: EncryptionKeyPair,
    pub sig: SigningKeyPair,
}

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    user_id: String,
    password: String,
    #[serde(with = "hex_bytes")]
    enc_secret: Vec<u8>,
    #[serde(with = "hex_bytes")]
    sig_secret: Vec<u8>,
}

impl Identity {
    pub fn generate(user_id: &str, password: &str) -> Self {
        Identity {
            user_id: user_id.to_string(),
            password: password.to_string(),
            enc: EncryptionKeyPair::generate(),
            sig: SigningKeyPair::generate(),
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let file = IdentityFile {
            user_id: self.user_id.clone(),
            password: self.password.clone(),
            enc_secret: self.enc.secret_bytes().to_vec(),
            sig_secret: self.sig.secret_bytes().to_vec(),
        };
        let json = serde_json::to_vec_pretty(&file)?;
        fsutil::write_atomic(path, &json)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let file: IdentityFile = serde_json::from_slice(&fs::read(path)?)?;
        let secret = |bytes: Vec<u8>| -> io::Result<[u8; 32]> {
            bytes
                .try_into()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "secret key must be 32 bytes"))
        };
        Ok(Identity {
            enc: EncryptionKeyPair::from_secret_bytes(secret(file.enc_secret)?),
            sig: SigningKeyPair::from_secret_bytes(secret(file.sig_secret)?),
            user_id: file.user_id,
            password: file.password,
        })
    }
}

/// What one receiver may see of one dossier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    /// Permitted columns; always includes the primary key.
    pub fields: BTreeSet<String>,
    /// Key records deposited under this grant expire at this time (ms since epoch).
    pub expiry: Option<u64>,
}

/// One delivered version of a dossier to one receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentEntry {
    pub id: u64,
    #[serde(with = "row_key_hex")]
    pub key: RowKey,
    /// SHA-256 of the serialized filtered row.
    #[serde(with = "hex_bytes")]
    pub digest: Vec<u8>,
}

mod row_key_hex {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &RowKey, s: S) -> Result<S::Ok, S::Error> {
        hex_bytes::serialize(key.as_bytes(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RowKey, D::Error> {
        let bytes = hex_bytes::deserialize(d)?;
        RowKey::from_slice(&bytes).map_err(serde::de::Error::custom)
    }
}

/// A network operation that could not complete and will be retried.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OutboxOp {
    /// Send a fresh version of the dossier to the receiver.
    Send { dossier: DossierRef, receiver: String },
    /// The row was sent but its key was not deposited yet.
    Deposit {
        dossier: DossierRef,
        receiver: String,
        entry: SentEntry,
    },
    /// Key records still to delete at the synchronizer.
    Revoke {
        dossier: DossierRef,
        receiver: String,
        ids: Vec<u64>,
    },
}

impl OutboxOp {
    pub fn target(&self) -> (&DossierRef, &str) {
        match self {
            OutboxOp::Send { dossier, receiver }
            | OutboxOp::Deposit { dossier, receiver, .. }
            | OutboxOp::Revoke { dossier, receiver, .. } => (dossier, receiver),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentState {
    pub policy: RevokedPolicy,
    pub grants: BTreeMap<(DossierRef, String), Grant>,
    pub sent: BTreeMap<(DossierRef, String), Vec<SentEntry>>,
    pub outbox: Vec<OutboxOp>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    policy: RevokedPolicy,
    grants: Vec<GrantLine>,
    sent: Vec<SentLine>,
    outbox: Vec<OutboxOp>,
}

#[derive(Serialize, Deserialize)]
struct GrantLine {
    dossier: DossierRef,
    receiver: String,
    fields: BTreeSet<String>,
    expiry: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SentLine {
    dossier: DossierRef,
    receiver: String,
    entries: Vec<SentEntry>,
}

impl AgentState {
    /// Receivers currently granted access to `dossier`.
    pub fn receivers<'a>(&'a self, dossier: &'a DossierRef) -> impl Iterator<Item = (&'a str, &'a Grant)> + 'a {
        self.grants
            .range((dossier.clone(), String::new())..)
            .take_while(move |((d, _), _)| d == dossier)
            .map(|((_, r), g)| (r.as_str(), g))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let file = StateFile {
            policy: self.policy,
            grants: self
                .grants
                .iter()
                .map(|((dossier, receiver), g)| GrantLine {
                    dossier: dossier.clone(),
                    receiver: receiver.clone(),
                    fields: g.fields.clone(),
                    expiry: g.expiry,
                })
                .collect(),
            sent: self
                .sent
                .iter()
                .map(|((dossier, receiver), entries)| SentLine {
                    dossier: dossier.clone(),
                    receiver: receiver.clone(),
                    entries: entries.clone(),
                })
                .collect(),
            outbox: self.outbox.clone(),
        };
        fsutil::write_atomic(path, &serde_json::to_vec(&file)?)
    }

    /// Reads the state file; a missing file is an empty state.
    pub fn load(path: &Path) -> io::Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(AgentState::default()),
            Err(e) => return Err(e),
        };
        let file: StateFile = serde_json::from_slice(&bytes)?;
        Ok(AgentState {
            policy: file.policy,
            grants: file
                .grants
                .into_iter()
                .map(|g| {
                    (
                        (g.dossier, g.receiver),
                        Grant {
                            fields: g.fields,
                            expiry: g.expiry,
                        },
                    )
                })
                .collect(),
            sent: file
                .sent
                .into_iter()
                .map(|s| ((s.dossier, s.receiver), s.entries))
                .collect(),
            outbox: file.outbox,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("identity.json");
        let id = Identity::generate("alice", "pw");
        id.save(&path).unwrap();
        let back = Identity::load(&path).unwrap();
        assert_eq!(back.user_id, "alice");
        assert_eq!(back.enc.public(), id.enc.public());
        assert_eq!(back.sig.public(), id.sig.public());
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        assert_eq!(AgentState::load(&path).unwrap(), AgentState::default());

        let d = DossierRef::new("students", 12);
        let mut state = AgentState {
            policy: RevokedPolicy::Retain,
            ..Default::default()
        };
        state.grants.insert(
            (d.clone(), "bob".into()),
            Grant {
                fields: ["id".to_string(), "name".to_string()].into(),
                expiry: Some(99),
            },
        );
        let entry = SentEntry {
            id: 7,
            key: RowKey::generate(),
            digest: vec![1; 32],
        };
        state.sent.insert((d.clone(), "bob".into()), vec![entry.clone()]);
        state.outbox.push(OutboxOp::Deposit {
            dossier: d.clone(),
            receiver: "bob".into(),
            entry,
        });
        state.outbox.push(OutboxOp::Revoke {
            dossier: d,
            receiver: "carol".into(),
            ids: vec![3, 4],
        });
        state.save(&path).unwrap();
        assert_eq!(AgentState::load(&path).unwrap(), state);
    }
}
