//! Origin side of the update flow: streams sealed snapshots to preservers.

use std::collections::HashSet;
use std::sync::Arc;

use parking_lot::RwLock;

use super::message::{Body, NodeId, PeerMessage, Status};
use super::transport::FrameHandler;
use super::verifier::protocol_error;
use crate::pad::{PadError, TreapPad};

pub struct OriginService {
    id: NodeId,
    pad: Arc<RwLock<TreapPad>>,
    preservers: Option<HashSet<NodeId>>,
}

impl OriginService {
    /// With `preservers`, only those nodes may pull snapshots.
    pub fn new(id: NodeId, pad: Arc<RwLock<TreapPad>>, preservers: Option<HashSet<NodeId>>) -> OriginService {
        OriginService { id, pad, preservers }
    }

    fn block(&self, s: u64, after: Option<u64>) -> Body {
        let end = |status| Body::UpdateEndOfData { status, snapshot_id: s };
        let pad = self.pad.read();
        let found = match after {
            None => pad.first_block_of_snapshot(s),
            Some(b) => pad.next_block_of_snapshot(s, b),
        };
        match found {
            Ok(Some(img)) => Body::UpdateData { snapshot_id: s, block_no: img.block_no, page: img.payload },
            Ok(None) => end(Status::Ok),
            Err(PadError::UnknownSnapshot(_)) => end(Status::UnknownSnapshot),
            Err(e) => {
                log::error!("cannot serve snapshot {s}: {e}");
                end(Status::ProtocolError)
            }
        }
    }
}

impl FrameHandler for OriginService {
    fn handle(&self, msg: PeerMessage) -> PeerMessage {
        let allowed = self.preservers.as_ref().is_none_or(|p| p.contains(&msg.sender));
        let body = match msg.body {
            Body::UpdateBegin { snapshot_id } | Body::UpdateGetNext { snapshot_id, .. } if !allowed => {
                Body::UpdateEndOfData { status: Status::Unauthorized, snapshot_id }
            }
            Body::UpdateBegin { snapshot_id } => self.block(snapshot_id, None),
            Body::UpdateGetNext { snapshot_id, after_block } => self.block(snapshot_id, Some(after_block)),
            _ => return protocol_error(self.id),
        };
        PeerMessage::new(self.id, body)
    }
}
