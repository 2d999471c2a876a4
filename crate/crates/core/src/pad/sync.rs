//! Block-level replication: enumerate the blocks a snapshot wrote and
//! replay them into a stale pad.
//!
//! Enumeration reads the synced image, so a pad with unsealed changes still
//! serves exactly its sealed snapshots. Received snapshots may be staged
//! without a sync; the final commit of a run verifies the whole result and
//! makes it durable in one step. Intermediate staged states are not checked
//! on their own because blocks written in place by later snapshots are only
//! consistent once every snapshot of the run is present.

use super::{Meta, PadError, Result, TreapPad};
use crate::digest::Digest;
use crate::store::BlockImage;

impl TreapPad {
    fn check_served(&self, snapshot_id: u64) -> Result<()> {
        if snapshot_id == 0 || snapshot_id > self.durable_sealed {
            return Err(PadError::UnknownSnapshot(snapshot_id));
        }
        Ok(())
    }

    /// First block stamped with `snapshot_id`, or `None` at end of data.
    pub fn first_block_of_snapshot(&self, snapshot_id: u64) -> Result<Option<BlockImage>> {
        self.check_served(snapshot_id)?;
        self.durable_block(snapshot_id, None)
    }

    pub fn next_block_of_snapshot(&self, snapshot_id: u64, after_block: u64) -> Result<Option<BlockImage>> {
        self.check_served(snapshot_id)?;
        self.durable_block(snapshot_id, Some(after_block))
    }

    fn durable_block(&self, snapshot_id: u64, after: Option<u64>) -> Result<Option<BlockImage>> {
        match self.store.durable_block_after(snapshot_id, after) {
            None => Ok(None),
            Some(b) => Ok(Some(self.store.read_durable_block(b)?)),
        }
    }

    /// Latest snapshot, counting staged but uncommitted ones.
    pub fn staged_latest(&self) -> u64 {
        self.staged.unwrap_or(self.meta.latest_sealed)
    }

    pub fn in_update_session(&self) -> bool {
        self.session.is_some()
    }

    pub fn binary_update_begin(&mut self, snapshot_id: u64) -> Result<()> {
        if self.session.is_some() {
            return Err(PadError::UpdateInProgress);
        }
        if self.open_dirty {
            return Err(PadError::PendingWrites);
        }
        let expected = self.staged_latest() + 1;
        if snapshot_id != expected {
            return Err(PadError::SnapshotGap { expected, got: snapshot_id });
        }
        self.store.set_current_epoch(snapshot_id)?;
        self.store.begin_session();
        self.session = Some(snapshot_id);
        Ok(())
    }

    pub fn binary_update_block(&mut self, snapshot_id: u64, image: &BlockImage) -> Result<()> {
        if self.session != Some(snapshot_id) {
            return Err(PadError::NotInUpdateSession);
        }
        if image.epoch_stamp != snapshot_id {
            return Err(PadError::CommitRejected(format!(
                "block {} stamped {} in the stream of snapshot {snapshot_id}",
                image.block_no, image.epoch_stamp
            )));
        }
        self.store.write_block(image)?;
        Ok(())
    }

    /// Records the received snapshot without syncing or verifying it. A
    /// later [`TreapPad::binary_update_commit`] checks and persists the run.
    pub fn binary_update_stage(&mut self, snapshot_id: u64) -> Result<()> {
        if self.session != Some(snapshot_id) {
            return Err(PadError::NotInUpdateSession);
        }
        self.store.end_session();
        self.session = None;
        self.staged = Some(snapshot_id);
        self.store.set_current_epoch(snapshot_id + 1)?;
        Ok(())
    }

    /// Ends the session for `snapshot_id`, verifies every snapshot received
    /// since the last sync and makes them durable. With `expected_la`, the
    /// list head must also match it. Any failure rolls back the whole run.
    pub fn binary_update_commit(&mut self, snapshot_id: u64, expected_la: Option<Digest>) -> Result<()> {
        self.finish_session(snapshot_id)?;
        let result = self.verify_staged(expected_la).and_then(|()| Ok(self.store.sync()?));
        match result {
            Ok(()) => {
                self.durable_sealed = self.meta.latest_sealed;
                Ok(())
            }
            Err(e) => {
                self.abort_staged()?;
                Err(e)
            }
        }
    }

    /// Drops the open session and every staged snapshot.
    pub fn binary_update_abort(&mut self) -> Result<()> {
        self.abort_staged()
    }

    fn finish_session(&mut self, snapshot_id: u64) -> Result<()> {
        if self.session != Some(snapshot_id) {
            return Err(PadError::NotInUpdateSession);
        }
        self.store.end_session();
        self.session = None;
        self.staged = None;
        let meta = match Self::read_meta(&self.store) {
            Ok(m) => m,
            Err(e) => {
                self.abort_staged()?;
                return Err(PadError::CommitRejected(format!("meta record: {e}")));
            }
        };
        if let Err(e) = self.accept_meta(meta, snapshot_id) {
            self.abort_staged()?;
            return Err(e);
        }
        self.meta = meta;
        self.store.set_current_epoch(snapshot_id + 1)?;
        Ok(())
    }

    fn accept_meta(&self, meta: Meta, snapshot_id: u64) -> Result<()> {
        if meta.latest_sealed != snapshot_id {
            return Err(PadError::CommitRejected(format!(
                "received state is at snapshot {}, expected {snapshot_id}",
                meta.latest_sealed
            )));
        }
        if self.meta.latest_sealed > 0 && (meta.alg, meta.skip_no) != (self.meta.alg, self.meta.skip_no) {
            return Err(PadError::CommitRejected("hash or skip number changed".into()));
        }
        Ok(())
    }

    fn verify_staged(&self, expected_la: Option<Digest>) -> Result<()> {
        let reject = |e: PadError| match e {
            PadError::CommitRejected(_) => e,
            e => PadError::CommitRejected(e.to_string()),
        };
        let la = self.list().refold(&self.store).map_err(|e| reject(e.into()))?;
        if let Some(want) = expected_la {
            if la != want {
                return Err(PadError::CommitRejected("list authenticator mismatch".into()));
            }
        }
        for s in self.durable_sealed + 1..=self.meta.latest_sealed {
            let record = self.snapshot_record(s).map_err(reject)?;
            let pra = self.auth_of_id(record.root, s, false).map_err(reject)?;
            if pra != record.pra {
                return Err(PadError::CommitRejected(format!("root authenticator mismatch at snapshot {s}")));
            }
        }
        Ok(())
    }

    fn abort_staged(&mut self) -> Result<()> {
        self.store.rollback();
        self.session = None;
        self.staged = None;
        self.meta = if self.store.block_count() == 0 { Self::empty_meta() } else { Self::read_meta(&self.store)? };
        Ok(())
    }
}
