//! Open-addressing hashtable of metadata entries keyed by PMO name.

use super::{Geometry, MetadataEntry, SlotState, ENTRY_SIZE};
use crate::pmem::Medium;
use crate::Result;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Slots visited by linear probing for `name`, starting at its home slot.
pub fn probe_sequence(name: &str, capacity: u64) -> impl Iterator<Item = usize> {
    let home = fnv1a(name.as_bytes()) % capacity;
    (0..capacity).map(move |i| ((home + i) % capacity) as usize)
}

pub(crate) fn read_entry<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    slot: usize,
) -> Result<MetadataEntry> {
    let buf = m.read_vec(geom.entry_offset(slot), ENTRY_SIZE as usize)?;
    Ok(MetadataEntry::decode(&buf))
}

pub(crate) fn read_slot_state<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    slot: usize,
) -> Result<SlotState> {
    Ok(SlotState::from_word(m.read_u64(geom.entry_offset(slot))?))
}

/// Finds the live entry named `name`. Probing stops at the first empty slot.
pub(crate) fn lookup<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    name: &str,
) -> Result<Option<(usize, MetadataEntry)>> {
    for slot in probe_sequence(name, geom.max_pmos) {
        match read_slot_state(m, geom, slot)? {
            SlotState::Empty => return Ok(None),
            SlotState::Tombstone => continue,
            SlotState::Live(_) | SlotState::Corrupt(_) => {
                let e = read_entry(m, geom, slot)?;
                if e.name == name {
                    return Ok(Some((slot, e)));
                }
            }
        }
    }
    Ok(None)
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum InsertSlot {
    Free(usize),
    Exists(usize),
    Full,
}

/// Where a new entry named `name` goes: the first tombstone or empty slot on
/// its probe path, unless the name is already present.
pub(crate) fn find_insert_slot<M: Medium + ?Sized>(
    m: &M,
    geom: &Geometry,
    name: &str,
) -> Result<InsertSlot> {
    let mut free = None;
    for slot in probe_sequence(name, geom.max_pmos) {
        match read_slot_state(m, geom, slot)? {
            SlotState::Empty => return Ok(InsertSlot::Free(free.unwrap_or(slot))),
            SlotState::Tombstone => {
                free.get_or_insert(slot);
            }
            SlotState::Live(_) | SlotState::Corrupt(_) => {
                if read_entry(m, geom, slot)?.name == name {
                    return Ok(InsertSlot::Exists(slot));
                }
            }
        }
    }
    Ok(free.map_or(InsertSlot::Full, InsertSlot::Free))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn probe_visits_every_slot_once() {
        let mut slots: Vec<_> = probe_sequence("A", 64).collect();
        assert_eq!(slots[0] as u64, fnv1a(b"A") % 64);
        slots.sort();
        assert_eq!(slots, (0..64).collect::<Vec<_>>());
    }
}
