//! On-media format of a PMO system.
//!
//! ```text
//! 0x0000            header page (4096 bytes)
//! 0x1000            metadata region: allocated count (one line), then
//!                   `max_pmos` 256-byte entries, padded to a page
//! data_offset       data region: PMO primaries, shadows, free-list nodes
//! ```
//!
//! All integers are little-endian at fixed offsets. The second line of the
//! header and the first line of every metadata entry are uncacheable: they
//! are only ever written with 8-byte uncached atomic writes, which makes
//! every state transition durable and untearable.

mod alloc;
mod bitmap;
mod entry;
mod format;
mod header;
mod table;

pub use alloc::FreeExtent;
pub(crate) use alloc::{allocate_extent, free_extents, release_extent};
pub use bitmap::{clear_bits, dirty_pages, page_bits, set_bits, ShadowLayout, DIRTY, PRESENT};
pub use entry::{MetadataEntry, PmoState, SlotState, TOMBSTONE};
pub(crate) use entry::{E_BOOT, E_PID, E_READERS, E_SHADOW, E_STATE};
pub use format::{format_device, read_header, Inspection};
pub use header::{Geometry, SystemHeader};
pub(crate) use header::{HeaderCache, H_BOOT, H_FREE_HEAD, H_NEXT_FREE};
pub(crate) use table::{find_insert_slot, lookup, read_entry, InsertSlot};
pub use table::{fnv1a, probe_sequence};

use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"PMOSYSV1";
pub const METADATA_OFFSET: u64 = crate::PAGE_SIZE;
/// The allocated-count header of the metadata region occupies one line so
/// that entries start line aligned.
pub const METADATA_PREAMBLE: u64 = crate::LINE_SIZE;
pub const ENTRY_SIZE: u64 = 256;
pub const SYSTEM_NAME_LEN: usize = 64;
pub const NAME_FIELD_LEN: usize = 48;
pub const MAX_NAME_LEN: usize = NAME_FIELD_LEN - 1;

/// PMO names: 1..=47 bytes, printable, no whitespace.
pub fn validate_pmo_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return Err(Error::Domain(format!(
            "PMO name must be 1..={MAX_NAME_LEN} bytes, got {}",
            name.len()
        )));
    }
    if name.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(Error::Domain(format!(
            "PMO name {name:?} contains whitespace"
        )));
    }
    Ok(())
}

pub(crate) fn pages_for(size: u64) -> u64 {
    size.div_ceil(crate::PAGE_SIZE)
}

pub(crate) fn get_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

pub(crate) fn put_u64(buf: &mut [u8], at: usize, v: u64) {
    buf[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

/// Text stored zero-padded in a fixed field.
pub(crate) fn get_text(field: &[u8]) -> String {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    String::from_utf8_lossy(&field[..end]).into_owned()
}
