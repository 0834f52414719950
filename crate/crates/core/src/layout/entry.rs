use std::fmt;

use super::{get_text, get_u64, put_u64, ENTRY_SIZE, NAME_FIELD_LEN};

// Line 0: uncached, written one word at a time.
pub(crate) const E_STATE: u64 = 0x00;
pub(crate) const E_PID: u64 = 0x08;
pub(crate) const E_BOOT: u64 = 0x10;
pub(crate) const E_READERS: u64 = 0x18;
pub(crate) const E_SHADOW: u64 = 0x20;
// Lines 1-3: cached, written once at creation.
pub(crate) const E_NAME: usize = 0x40;
pub(crate) const E_SIZE: usize = 0x70;
pub(crate) const E_PRIMARY: usize = 0x78;
pub(crate) const E_READ_KEY: usize = 0x80;
pub(crate) const E_WRITE_KEY: usize = 0x88;

/// Low byte of the state word of a deleted entry. Lookups probe past it.
pub const TOMBSTONE: u8 = 0x80;

/// Persistent state of a live PMO. Each state is a single bit so that a
/// torn or corrupted state word is detectable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PmoState {
    /// Not attached.
    Detached = 0x01,
    /// Attached read-only.
    Read = 0x02,
    /// Attached for writing.
    Write = 0x04,
    /// psync in progress, primary untouched.
    Persisting = 0x08,
    /// Shadow durable, copy into the primary in progress.
    Copying = 0x10,
}

impl PmoState {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => PmoState::Detached,
            0x02 => PmoState::Read,
            0x04 => PmoState::Write,
            0x08 => PmoState::Persisting,
            0x10 => PmoState::Copying,
            _ => return None,
        })
    }

    pub fn letter(self) -> char {
        match self {
            PmoState::Detached => 'D',
            PmoState::Read => 'R',
            PmoState::Write => 'W',
            PmoState::Persisting => 'P',
            PmoState::Copying => 'C',
        }
    }
}

impl fmt::Display for PmoState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Decoded state word of a metadata slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    Empty,
    Tombstone,
    Live(PmoState),
    /// Any other word; never written by this crate.
    Corrupt(u64),
}

impl SlotState {
    pub fn from_word(word: u64) -> Self {
        match word {
            0 => SlotState::Empty,
            w if w == TOMBSTONE as u64 => SlotState::Tombstone,
            w => match u8::try_from(w).ok().and_then(PmoState::from_byte) {
                Some(s) => SlotState::Live(s),
                None => SlotState::Corrupt(w),
            },
        }
    }

    pub fn word(self) -> u64 {
        match self {
            SlotState::Empty => 0,
            SlotState::Tombstone => TOMBSTONE as u64,
            SlotState::Live(s) => s as u64,
            SlotState::Corrupt(w) => w,
        }
    }

    pub fn live(self) -> Option<PmoState> {
        match self {
            SlotState::Live(s) => Some(s),
            _ => None,
        }
    }
}

/// One 256-byte metadata entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataEntry {
    pub state: SlotState,
    pub attached_pid: u64,
    pub attach_boot_id: u64,
    pub reader_count: u64,
    /// Data-region page of the shadow extent.
    pub shadow_offset: Option<u64>,
    pub name: String,
    pub size: u64,
    /// Data-region page of the primary extent.
    pub primary_offset: u64,
    pub read_key: u64,
    pub write_key: u64,
}

impl MetadataEntry {
    /// A freshly created, detached entry.
    pub fn new(name: &str, size: u64, primary_offset: u64, read_key: u64, write_key: u64) -> Self {
        MetadataEntry {
            state: SlotState::Live(PmoState::Detached),
            attached_pid: 0,
            attach_boot_id: 0,
            reader_count: 0,
            shadow_offset: None,
            name: name.to_owned(),
            size,
            primary_offset,
            read_key,
            write_key,
        }
    }

    pub fn encode(&self) -> [u8; ENTRY_SIZE as usize] {
        let mut buf = [0u8; ENTRY_SIZE as usize];
        put_u64(&mut buf, E_STATE as usize, self.state.word());
        put_u64(&mut buf, E_PID as usize, self.attached_pid);
        put_u64(&mut buf, E_BOOT as usize, self.attach_boot_id);
        put_u64(&mut buf, E_READERS as usize, self.reader_count);
        put_u64(
            &mut buf,
            E_SHADOW as usize,
            encode_shadow(self.shadow_offset),
        );
        let name = self.name.as_bytes();
        let n = name.len().min(NAME_FIELD_LEN - 1);
        buf[E_NAME..E_NAME + n].copy_from_slice(&name[..n]);
        put_u64(&mut buf, E_SIZE, self.size);
        put_u64(&mut buf, E_PRIMARY, self.primary_offset);
        put_u64(&mut buf, E_READ_KEY, self.read_key);
        put_u64(&mut buf, E_WRITE_KEY, self.write_key);
        buf
    }

    pub fn decode(buf: &[u8]) -> Self {
        MetadataEntry {
            state: SlotState::from_word(get_u64(buf, E_STATE as usize)),
            attached_pid: get_u64(buf, E_PID as usize),
            attach_boot_id: get_u64(buf, E_BOOT as usize),
            reader_count: get_u64(buf, E_READERS as usize),
            shadow_offset: decode_shadow(get_u64(buf, E_SHADOW as usize)),
            name: get_text(&buf[E_NAME..E_NAME + NAME_FIELD_LEN]),
            size: get_u64(buf, E_SIZE),
            primary_offset: get_u64(buf, E_PRIMARY),
            read_key: get_u64(buf, E_READ_KEY),
            write_key: get_u64(buf, E_WRITE_KEY),
        }
    }

    pub fn pages(&self) -> u64 {
        super::pages_for(self.size)
    }
}

/// The shadow word is biased by one so that zero means "no shadow" even
/// though page 0 is a valid shadow location.
pub(crate) fn encode_shadow(page: Option<u64>) -> u64 {
    page.map_or(0, |p| p + 1)
}

pub(crate) fn decode_shadow(word: u64) -> Option<u64> {
    word.checked_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn states_are_one_hot() {
        for s in [
            PmoState::Detached,
            PmoState::Read,
            PmoState::Write,
            PmoState::Persisting,
            PmoState::Copying,
        ] {
            assert_eq!((s as u8).count_ones(), 1);
            assert_eq!(SlotState::from_word(s as u64), SlotState::Live(s));
        }
        assert_eq!(SlotState::from_word(0x03), SlotState::Corrupt(3));
        assert_eq!(SlotState::from_word(0x80), SlotState::Tombstone);
        assert_eq!(SlotState::from_word(0x104), SlotState::Corrupt(0x104));
    }

    #[test]
    fn field_offsets() {
        let mut e = MetadataEntry::new("A", 16384, 7, 0x11, 0x22);
        e.shadow_offset = Some(0);
        e.attached_pid = 42;
        let buf = e.encode();
        assert_eq!(get_u64(&buf, 0x00), 0x01);
        assert_eq!(get_u64(&buf, 0x08), 42);
        assert_eq!(get_u64(&buf, 0x20), 1);
        assert_eq!(&buf[0x40..0x42], b"A\0");
        assert_eq!(get_u64(&buf, 0x70), 16384);
        assert_eq!(get_u64(&buf, 0x78), 7);
        assert_eq!(get_u64(&buf, 0x80), 0x11);
        assert_eq!(get_u64(&buf, 0x88), 0x22);
        assert!(buf[0x90..].iter().all(|&b| b == 0));
    }

    fn state() -> impl Strategy<Value = SlotState> {
        prop_oneof![
            Just(SlotState::Empty),
            Just(SlotState::Tombstone),
            (0usize..5).prop_map(|i| SlotState::Live(PmoState::from_byte(1 << i).unwrap())),
        ]
    }

    proptest! {
        #[test]
        fn entry_round_trip(
            state in state(),
            pid in any::<u64>(),
            boot in any::<u64>(),
            readers in any::<u64>(),
            shadow in proptest::option::of(0u64..u64::MAX - 1),
            name in "[!-~]{1,47}",
            size in any::<u64>(),
            primary in any::<u64>(),
            rk in any::<u64>(),
            wk in any::<u64>(),
        ) {
            let e = MetadataEntry {
                state,
                attached_pid: pid,
                attach_boot_id: boot,
                reader_count: readers,
                shadow_offset: shadow,
                name,
                size,
                primary_offset: primary,
                read_key: rk,
                write_key: wk,
            };
            prop_assert_eq!(MetadataEntry::decode(&e.encode()), e);
        }
    }
}
