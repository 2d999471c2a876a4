//! Verifier role: keeps the tokens each origin published and attests to the
//! latest one on request.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::message::{Body, CatalogToken, NodeId, PeerMessage, Status};
use crate::digest::Digest;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OriginTokens {
    pub tokens: Vec<CatalogToken>,
    pub reset_counter: u64,
}

/// Tokens per origin. Snapshot ids only increase, except across a reset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenRegistry {
    origins: BTreeMap<NodeId, OriginTokens>,
}

impl TokenRegistry {
    pub fn latest(&self, origin: &NodeId) -> Option<CatalogToken> {
        self.origins.get(origin).and_then(|o| o.tokens.last().copied())
    }

    pub fn tokens(&self, origin: &NodeId) -> &[CatalogToken] {
        self.origins.get(origin).map_or(&[], |o| &o.tokens)
    }

    /// Accepts a newer token. Re-storing the current latest token is a
    /// no-op that still succeeds.
    pub fn store(&mut self, origin: NodeId, token: CatalogToken) -> Status {
        let entry = self.origins.entry(origin).or_default();
        match entry.tokens.last() {
            Some(last) if *last == token => Status::Ok,
            Some(last) if token.snapshot_id <= last.snapshot_id => Status::StaleToken,
            _ => {
                entry.tokens.push(token);
                Status::Ok
            }
        }
    }

    /// Makes `token` the latest, dropping every token at or after its
    /// snapshot. `counter` must exceed the last reset counter seen.
    pub fn reset(&mut self, origin: NodeId, token: CatalogToken, counter: u64) -> Status {
        let entry = self.origins.entry(origin).or_default();
        if counter <= entry.reset_counter {
            return Status::Unauthorized;
        }
        entry.tokens.retain(|t| t.snapshot_id < token.snapshot_id);
        entry.tokens.push(token);
        entry.reset_counter = counter;
        Status::Ok
    }
}

#[derive(Serialize, Deserialize)]
struct SavedOrigin {
    origin: String,
    reset_counter: u64,
    tokens: Vec<(u64, String)>,
}

fn save(path: &Path, reg: &TokenRegistry) -> io::Result<()> {
    let saved: Vec<SavedOrigin> = reg
        .origins
        .iter()
        .map(|(id, o)| SavedOrigin {
            origin: id.to_hex(),
            reset_counter: o.reset_counter,
            tokens: o.tokens.iter().map(|t| (t.snapshot_id, t.authenticator.to_hex())).collect(),
        })
        .collect();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&saved)?)?;
    fs::rename(tmp, path)
}

fn load(path: &Path) -> io::Result<TokenRegistry> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
    let saved: Vec<SavedOrigin> = serde_json::from_slice(&fs::read(path)?).map_err(|e| bad(&e.to_string()))?;
    let mut reg = TokenRegistry::default();
    for o in saved {
        let id = hex::decode(&o.origin).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| bad("origin id"))?;
        let mut tokens = Vec::with_capacity(o.tokens.len());
        for (sid, la) in o.tokens {
            let authenticator = Digest::from_hex(&la).ok_or_else(|| bad("token digest"))?;
            tokens.push(CatalogToken { snapshot_id: sid, authenticator });
        }
        reg.origins.insert(NodeId(id), OriginTokens { tokens, reset_counter: o.reset_counter });
    }
    Ok(reg)
}

pub struct Verifier {
    id: NodeId,
    allowlist: Option<HashSet<NodeId>>,
    registry: Mutex<TokenRegistry>,
    state_file: Option<PathBuf>,
}

impl Verifier {
    pub fn new(id: NodeId, allowlist: Option<HashSet<NodeId>>) -> Verifier {
        Verifier { id, allowlist, registry: Mutex::default(), state_file: None }
    }

    /// A verifier whose registry survives restarts in `state_file`.
    pub fn with_state_file(id: NodeId, allowlist: Option<HashSet<NodeId>>, state_file: PathBuf) -> io::Result<Verifier> {
        let registry = if state_file.exists() { load(&state_file)? } else { TokenRegistry::default() };
        Ok(Verifier { id, allowlist, registry: Mutex::new(registry), state_file: Some(state_file) })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn is_allowed(&self, origin: &NodeId) -> bool {
        self.allowlist.as_ref().is_none_or(|a| a.contains(origin))
    }

    pub fn latest(&self, origin: &NodeId) -> Option<CatalogToken> {
        self.registry.lock().latest(origin)
    }

    pub fn registry(&self) -> TokenRegistry {
        self.registry.lock().clone()
    }

    fn reply(&self, body: Body) -> PeerMessage {
        PeerMessage::new(self.id, body)
    }

    fn persist(&self, reg: &TokenRegistry) {
        if let Some(path) = &self.state_file {
            if let Err(e) = save(path, reg) {
                log::error!("cannot save token registry: {e}");
            }
        }
    }

    /// Handles the token messages; anything else is a protocol error.
    pub fn handle(&self, msg: PeerMessage) -> PeerMessage {
        let origin = msg.sender;
        match msg.body {
            Body::Store { token } => {
                let status = if self.is_allowed(&origin) {
                    let mut reg = self.registry.lock();
                    let before = reg.latest(&origin);
                    let status = reg.store(origin, token);
                    if reg.latest(&origin) != before {
                        self.persist(&reg);
                    }
                    status
                } else {
                    Status::Unauthorized
                };
                self.reply(Body::StoreReply { status, snapshot_id: token.snapshot_id })
            }
            Body::StoredVersionRequest => {
                let token = if self.is_allowed(&origin) { self.latest(&origin) } else { None };
                let status = if token.is_some() { Status::Ok } else { Status::NoToken };
                self.reply(Body::StoredVersionReply { status, token })
            }
            Body::VersionReset { token, counter } => {
                let status = if self.is_allowed(&origin) {
                    let mut reg = self.registry.lock();
                    let status = reg.reset(origin, token, counter);
                    if status == Status::Ok {
                        self.persist(&reg);
                    }
                    status
                } else {
                    Status::Unauthorized
                };
                if status != Status::Ok {
                    log::warn!("refused version reset from {origin}");
                }
                self.reply(Body::StoreReply { status, snapshot_id: token.snapshot_id })
            }
            _ => protocol_error(self.id),
        }
    }
}

pub fn protocol_error(id: NodeId) -> PeerMessage {
    PeerMessage::new(id, Body::StoreReply { status: Status::ProtocolError, snapshot_id: 0 })
}

impl super::transport::FrameHandler for Verifier {
    fn handle(&self, msg: PeerMessage) -> PeerMessage {
        Verifier::handle(self, msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token(s: u64) -> CatalogToken {
        CatalogToken { snapshot_id: s, authenticator: Digest([s as u8; 32]) }
    }

    fn send(v: &Verifier, from: NodeId, body: Body) -> Body {
        v.handle(PeerMessage::new(from, body)).body
    }

    #[test]
    fn store_then_query() {
        let o = NodeId::from_name("origin");
        let v = Verifier::new(NodeId::from_name("v"), None);
        assert_eq!(send(&v, o, Body::Store { token: token(5) }), Body::StoreReply { status: Status::Ok, snapshot_id: 5 });
        assert_eq!(
            send(&v, o, Body::StoredVersionRequest),
            Body::StoredVersionReply { status: Status::Ok, token: Some(token(5)) }
        );
        // Origins are independent.
        assert_eq!(
            send(&v, NodeId::from_name("other"), Body::StoredVersionRequest),
            Body::StoredVersionReply { status: Status::NoToken, token: None }
        );
    }

    #[test]
    fn stale_tokens_are_refused() {
        let o = NodeId::from_name("origin");
        let v = Verifier::new(NodeId::from_name("v"), None);
        send(&v, o, Body::Store { token: token(5) });
        assert_eq!(send(&v, o, Body::Store { token: token(4) }), Body::StoreReply { status: Status::StaleToken, snapshot_id: 4 });
        let mut forged = token(5);
        forged.authenticator.0[0] ^= 1;
        assert_eq!(send(&v, o, Body::Store { token: forged }), Body::StoreReply { status: Status::StaleToken, snapshot_id: 5 });
        // Same token again is fine; gaps are fine.
        assert_eq!(send(&v, o, Body::Store { token: token(5) }), Body::StoreReply { status: Status::Ok, snapshot_id: 5 });
        assert_eq!(send(&v, o, Body::Store { token: token(9) }), Body::StoreReply { status: Status::Ok, snapshot_id: 9 });
    }

    #[test]
    fn reset_truncates() {
        let o = NodeId::from_name("origin");
        let v = Verifier::new(NodeId::from_name("v"), None);
        for s in 1..=5 {
            send(&v, o, Body::Store { token: token(s) });
        }
        assert_eq!(
            send(&v, o, Body::VersionReset { token: token(3), counter: 10 }),
            Body::StoreReply { status: Status::Ok, snapshot_id: 3 }
        );
        assert_eq!(v.latest(&o), Some(token(3)));
        assert_eq!(v.registry().tokens(&o).len(), 3);
        // Replayed counter.
        assert_eq!(
            send(&v, o, Body::VersionReset { token: token(1), counter: 10 }),
            Body::StoreReply { status: Status::Unauthorized, snapshot_id: 1 }
        );
        assert_eq!(v.latest(&o), Some(token(3)));
    }

    #[test]
    fn allowlist_is_enforced() {
        let o = NodeId::from_name("origin");
        let stranger = NodeId::from_name("stranger");
        let v = Verifier::new(NodeId::from_name("v"), Some([o].into()));
        assert_eq!(
            send(&v, stranger, Body::Store { token: token(1) }),
            Body::StoreReply { status: Status::Unauthorized, snapshot_id: 1 }
        );
        assert_eq!(
            send(&v, stranger, Body::VersionReset { token: token(1), counter: 1 }),
            Body::StoreReply { status: Status::Unauthorized, snapshot_id: 1 }
        );
        assert_eq!(send(&v, o, Body::Store { token: token(1) }), Body::StoreReply { status: Status::Ok, snapshot_id: 1 });
        assert!(matches!(send(&v, o, Body::UpdateBegin { snapshot_id: 1 }), Body::StoreReply { status: Status::ProtocolError, .. }));
    }

    #[test]
    fn registry_persists() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("tokens.json");
        let o = NodeId::from_name("origin");
        {
            let v = Verifier::with_state_file(NodeId::from_name("v"), None, path.clone()).unwrap();
            send(&v, o, Body::Store { token: token(2) });
            send(&v, o, Body::VersionReset { token: token(1), counter: 7 });
        }
        let v = Verifier::with_state_file(NodeId::from_name("v"), None, path).unwrap();
        assert_eq!(v.latest(&o), Some(token(1)));
        assert_eq!(
            send(&v, o, Body::VersionReset { token: token(1), counter: 7 }),
            Body::StoreReply { status: Status::Unauthorized, snapshot_id: 1 }
        );
    }
}
