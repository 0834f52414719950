use std::fmt;
use std::sync::atomic::Ordering;

use super::{is_clean, psync, Meta, System};
use crate::layout::{dirty_pages, read_entry, MetadataEntry, PmoState, ShadowLayout, SlotState};
use crate::pmem::Medium;
use crate::{Error, Result};

/// What recovery did to one PMO.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecoveryAction {
    /// Already consistent; at most stale attachment fields were cleared.
    None,
    /// Crashed before the commit point: the shadow was dropped.
    DiscardShadow,
    /// Crashed after the commit point: this many dirty pages were copied
    /// from the shadow into the primary.
    CopyShadowToPrimary(u64),
}

impl fmt::Display for RecoveryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecoveryAction::None => f.write_str("none"),
            RecoveryAction::DiscardShadow => f.write_str("discard-shadow"),
            RecoveryAction::CopyShadowToPrimary(n) => write!(f, "copy-shadow-to-primary {n} pages"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoveryReport {
    pub name: String,
    pub slot: usize,
    /// State found on the medium.
    pub state: PmoState,
    pub action: RecoveryAction,
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.action)
    }
}

impl<M: Medium> System<M> {
    /// Recovers every PMO not attached in this boot and repairs the
    /// allocated count. Returns one report per live PMO, by slot.
    pub fn recover_all(&self) -> Result<Vec<RecoveryReport>> {
        let mut meta = self.meta();
        self.recover_all_locked(&mut meta)
    }

    pub(super) fn recover_all_locked(&self, meta: &mut Meta) -> Result<Vec<RecoveryReport>> {
        let mut reports = Vec::new();
        for slot in 0..self.geom.max_pmos as usize {
            let e = read_entry(&*self.medium, &self.geom, slot)?;
            let state = match e.state {
                SlotState::Live(s) => s,
                SlotState::Empty | SlotState::Tombstone => continue,
                SlotState::Corrupt(w) => {
                    return Err(Error::Format(format!(
                        "metadata slot {slot} has invalid state word {w:#x}"
                    )))
                }
            };
            let action = if self.is_stale(meta, slot, &e) {
                self.recover_entry(meta, slot, &e, state)?
            } else {
                RecoveryAction::None
            };
            reports.push(RecoveryReport {
                name: e.name,
                slot,
                state,
                action,
            });
        }
        let at = self.geom.count_offset();
        let live = reports.len() as u64;
        if self.medium.read_u64(at)? != live {
            self.medium.persist(at, &live.to_le_bytes())?;
        }
        meta.recovery_pending = false;
        Ok(reports)
    }

    /// Recovers one PMO if it was left mid-operation.
    pub fn recover(&self, name: &str) -> Result<RecoveryAction> {
        let mut meta = self.meta();
        let (slot, e) = self.find(name)?;
        let state = e.state.live().expect("lookup returns live entries");
        if self.is_stale(&meta, slot, &e) {
            self.recover_entry(&mut meta, slot, &e, state)
        } else {
            Ok(RecoveryAction::None)
        }
    }

    fn is_stale(&self, meta: &Meta, slot: usize, e: &MetadataEntry) -> bool {
        !is_clean(e) && !meta.attachments.contains_key(&slot)
    }

    fn recover_entry(
        &self,
        meta: &mut Meta,
        slot: usize,
        e: &MetadataEntry,
        state: PmoState,
    ) -> Result<RecoveryAction> {
        let action = match (state, e.shadow_offset) {
            (PmoState::Copying, Some(start)) => {
                let shadow = ShadowLayout::new(&self.geom, start, e.pages());
                let bitmap = self
                    .medium
                    .read_vec(shadow.bitmap_addr(), shadow.bitmap_len() as usize)?;
                let dirty = dirty_pages(&bitmap, e.pages());
                let primary = self.geom.data_addr(e.primary_offset);
                psync::copy_pages(&*self.medium, &shadow, primary, &dirty)?;
                self.medium.fence();
                let n = dirty.len() as u64;
                self.counters
                    .recovery_pages_copied
                    .fetch_add(n, Ordering::Relaxed);
                RecoveryAction::CopyShadowToPrimary(n)
            }
            (PmoState::Write | PmoState::Persisting | PmoState::Copying, _) => {
                RecoveryAction::DiscardShadow
            }
            (PmoState::Detached | PmoState::Read, _) => RecoveryAction::None,
        };
        self.teardown(meta, slot, e)?;
        Ok(action)
    }
}
