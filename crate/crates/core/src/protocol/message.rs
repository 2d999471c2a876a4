//! Wire format.
//!
//! ```text
//! frame = length u32 | tag u8 | sender id (16) | body
//! ```
//!
//! `length` counts everything after itself. Body integers are big-endian.
//! The sender id is the node that sent the frame; in flows started by an
//! origin it is therefore the origin id.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::digest::{Digest, DIGEST_LEN};

pub const NODE_ID_LEN: usize = 16;
/// Octets before the body: length, tag, sender.
pub const FRAME_OVERHEAD: usize = 4 + 1 + NODE_ID_LEN;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId(pub [u8; NODE_ID_LEN]);

impl NodeId {
    /// Thirty-two hex digits are taken literally; any other name maps to
    /// the first sixteen octets of its SHA-256.
    pub fn from_name(name: &str) -> NodeId {
        if let Some(bytes) = hex::decode(name).ok().filter(|b| b.len() == NODE_ID_LEN) {
            return NodeId(bytes.try_into().unwrap());
        }
        let d = crate::digest::HashAlg::Sha256.hash(name.as_bytes());
        NodeId(d.0[..NODE_ID_LEN].try_into().unwrap())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for NodeId {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<NodeId, Self::Err> {
        Ok(NodeId::from_name(s))
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", &self.to_hex()[..8])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// `<snapshot_id, list authenticator>` as published to verifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CatalogToken {
    pub snapshot_id: u64,
    pub authenticator: Digest,
}

impl CatalogToken {
    pub const ENCODED_LEN: usize = 8 + DIGEST_LEN;

    fn put(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.snapshot_id.to_be_bytes());
        out.extend_from_slice(self.authenticator.as_bytes());
    }
}

impl fmt::Display for CatalogToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}>", self.snapshot_id, self.authenticator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    StaleToken = 1,
    Unauthorized = 2,
    UnknownSnapshot = 3,
    NoReplica = 4,
    NoToken = 5,
    ProtocolError = 6,
}

impl Status {
    fn from_u8(v: u8) -> Option<Status> {
        Some(match v {
            0 => Status::Ok,
            1 => Status::StaleToken,
            2 => Status::Unauthorized,
            3 => Status::UnknownSnapshot,
            4 => Status::NoReplica,
            5 => Status::NoToken,
            6 => Status::ProtocolError,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Store { token: CatalogToken },
    StoreReply { status: Status, snapshot_id: u64 },
    StoredVersionRequest,
    StoredVersionReply { status: Status, token: Option<CatalogToken> },
    RecoverVersionRequest,
    RecoverVersionReply { status: Status, token: Option<CatalogToken> },
    RecoverBegin { snapshot_id: u64 },
    RecoverData { snapshot_id: u64, block_no: u64, page: Vec<u8> },
    RecoverGetNext { snapshot_id: u64, after_block: u64 },
    RecoverEndOfData { status: Status, snapshot_id: u64 },
    VersionReset { token: CatalogToken, counter: u64 },
    UpdateBegin { snapshot_id: u64 },
    UpdateData { snapshot_id: u64, block_no: u64, page: Vec<u8> },
    UpdateGetNext { snapshot_id: u64, after_block: u64 },
    UpdateEndOfData { status: Status, snapshot_id: u64 },
}

impl Body {
    pub fn tag(&self) -> u8 {
        match self {
            Body::Store { .. } => 1,
            Body::StoreReply { .. } => 2,
            Body::StoredVersionRequest => 3,
            Body::StoredVersionReply { .. } => 4,
            Body::RecoverVersionRequest => 5,
            Body::RecoverVersionReply { .. } => 6,
            Body::RecoverBegin { .. } => 7,
            Body::RecoverData { .. } => 8,
            Body::RecoverGetNext { .. } => 9,
            Body::RecoverEndOfData { .. } => 10,
            Body::VersionReset { .. } => 11,
            Body::UpdateBegin { .. } => 12,
            Body::UpdateData { .. } => 13,
            Body::UpdateGetNext { .. } => 14,
            Body::UpdateEndOfData { .. } => 15,
        }
    }

    pub fn name(&self) -> &'static str {
        tag_name(self.tag())
    }
}

pub fn tag_name(tag: u8) -> &'static str {
    match tag {
        1 => "Store",
        2 => "StoreReply",
        3 => "StoredVersionRequest",
        4 => "StoredVersionReply",
        5 => "RecoverVersionRequest",
        6 => "RecoverVersionReply",
        7 => "RecoverBegin",
        8 => "RecoverData",
        9 => "RecoverGetNext",
        10 => "RecoverEndOfData",
        11 => "VersionReset",
        12 => "UpdateBegin",
        13 => "UpdateData",
        14 => "UpdateGetNext",
        15 => "UpdateEndOfData",
        _ => "Unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerMessage {
    pub sender: NodeId,
    pub body: Body,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("frame shorter than its header")]
    Truncated,
    #[error("frame length field says {declared}, frame has {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("{0} body has the wrong size")]
    BadBody(&'static str),
}

impl PeerMessage {
    pub fn new(sender: NodeId, body: Body) -> PeerMessage {
        PeerMessage { sender, body }
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_OVERHEAD + 64);
        out.extend_from_slice(&[0; 4]);
        out.push(self.body.tag());
        out.extend_from_slice(&self.sender.0);
        let token_or_zero = |out: &mut Vec<u8>, t: &Option<CatalogToken>| match t {
            Some(t) => t.put(out),
            None => out.extend_from_slice(&[0; CatalogToken::ENCODED_LEN]),
        };
        match &self.body {
            Body::Store { token } => token.put(&mut out),
            Body::StoreReply { status, snapshot_id }
            | Body::RecoverEndOfData { status, snapshot_id }
            | Body::UpdateEndOfData { status, snapshot_id } => {
                out.push(*status as u8);
                out.extend_from_slice(&snapshot_id.to_be_bytes());
            }
            Body::StoredVersionRequest | Body::RecoverVersionRequest => {}
            Body::StoredVersionReply { status, token } | Body::RecoverVersionReply { status, token } => {
                out.push(*status as u8);
                token_or_zero(&mut out, token);
            }
            Body::RecoverBegin { snapshot_id } | Body::UpdateBegin { snapshot_id } => {
                out.extend_from_slice(&snapshot_id.to_be_bytes())
            }
            Body::RecoverData { snapshot_id, block_no, page } | Body::UpdateData { snapshot_id, block_no, page } => {
                out.extend_from_slice(&snapshot_id.to_be_bytes());
                out.extend_from_slice(&block_no.to_be_bytes());
                out.extend_from_slice(page);
            }
            Body::RecoverGetNext { snapshot_id, after_block } | Body::UpdateGetNext { snapshot_id, after_block } => {
                out.extend_from_slice(&snapshot_id.to_be_bytes());
                out.extend_from_slice(&after_block.to_be_bytes());
            }
            Body::VersionReset { token, counter } => {
                token.put(&mut out);
                out.extend_from_slice(&counter.to_be_bytes());
            }
        }
        let len = (out.len() - 4) as u32;
        out[0..4].copy_from_slice(&len.to_be_bytes());
        out
    }

    pub fn decode(frame: &[u8]) -> Result<PeerMessage, DecodeError> {
        if frame.len() < FRAME_OVERHEAD {
            return Err(DecodeError::Truncated);
        }
        let declared = u32::from_be_bytes(frame[0..4].try_into().unwrap()) as usize;
        if declared != frame.len() - 4 {
            return Err(DecodeError::LengthMismatch { declared, actual: frame.len() - 4 });
        }
        let tag = frame[4];
        let sender = NodeId(frame[5..FRAME_OVERHEAD].try_into().unwrap());
        let b = &frame[FRAME_OVERHEAD..];
        let name = tag_name(tag);
        let fixed = |n: usize| if b.len() == n { Ok(()) } else { Err(DecodeError::BadBody(name)) };
        let u64_at = |at: usize| u64::from_be_bytes(b[at..at + 8].try_into().unwrap());
        let token_at = |at: usize| CatalogToken {
            snapshot_id: u64_at(at),
            authenticator: Digest::from_slice(&b[at + 8..at + 8 + DIGEST_LEN]).unwrap(),
        };
        let status_at = |at: usize| Status::from_u8(b[at]).ok_or(DecodeError::UnknownStatus(b[at]));
        let opt_token = |status: Status| (status == Status::Ok).then(|| token_at(1));
        let body = match tag {
            1 => {
                fixed(CatalogToken::ENCODED_LEN)?;
                Body::Store { token: token_at(0) }
            }
            2 | 10 | 15 => {
                fixed(9)?;
                let (status, snapshot_id) = (status_at(0)?, u64_at(1));
                match tag {
                    2 => Body::StoreReply { status, snapshot_id },
                    10 => Body::RecoverEndOfData { status, snapshot_id },
                    _ => Body::UpdateEndOfData { status, snapshot_id },
                }
            }
            3 | 5 => {
                fixed(0)?;
                if tag == 3 {
                    Body::StoredVersionRequest
                } else {
                    Body::RecoverVersionRequest
                }
            }
            4 | 6 => {
                fixed(1 + CatalogToken::ENCODED_LEN)?;
                let status = status_at(0)?;
                let token = opt_token(status);
                if tag == 4 {
                    Body::StoredVersionReply { status, token }
                } else {
                    Body::RecoverVersionReply { status, token }
                }
            }
            7 | 12 => {
                fixed(8)?;
                let snapshot_id = u64_at(0);
                if tag == 7 {
                    Body::RecoverBegin { snapshot_id }
                } else {
                    Body::UpdateBegin { snapshot_id }
                }
            }
            8 | 13 => {
                if b.len() < 16 {
                    return Err(DecodeError::BadBody(name));
                }
                let (snapshot_id, block_no, page) = (u64_at(0), u64_at(8), b[16..].to_vec());
                if tag == 8 {
                    Body::RecoverData { snapshot_id, block_no, page }
                } else {
                    Body::UpdateData { snapshot_id, block_no, page }
                }
            }
            9 | 14 => {
                fixed(16)?;
                let (snapshot_id, after_block) = (u64_at(0), u64_at(8));
                if tag == 9 {
                    Body::RecoverGetNext { snapshot_id, after_block }
                } else {
                    Body::UpdateGetNext { snapshot_id, after_block }
                }
            }
            11 => {
                fixed(CatalogToken::ENCODED_LEN + 8)?;
                Body::VersionReset { token: token_at(0), counter: u64_at(CatalogToken::ENCODED_LEN) }
            }
            t => return Err(DecodeError::UnknownTag(t)),
        };
        Ok(PeerMessage { sender, body })
    }
}
