use std::fmt;

use super::header::HEADER_UNCACHED;
use super::{
    get_u64, Geometry, MetadataEntry, SlotState, SystemHeader, ENTRY_SIZE, MAGIC, SYSTEM_NAME_LEN,
};
use crate::pmem::Medium;
use crate::{Error, Result, LINE_SIZE, PAGE_SIZE};

const ZERO_CHUNK: usize = 1 << 20;

/// Formats `m` as an empty PMO system.
///
/// The whole device is zeroed, then the uncached header words are written,
/// and the first header line (magic and name) is persisted last: a device
/// without a valid magic is unformatted, so a crash mid-format leaves it
/// unformatted. `m` must not have had ranges marked uncached that a zeroing
/// store would touch, other than the ones formatting itself marks.
pub fn format_device<M: Medium + ?Sized>(
    m: &M,
    system_name: &str,
    max_pmos: u64,
) -> Result<SystemHeader> {
    if system_name.len() > SYSTEM_NAME_LEN || system_name.contains('\0') {
        return Err(Error::Format(format!(
            "system name must be at most {SYSTEM_NAME_LEN} bytes without NUL"
        )));
    }
    let geom = Geometry::plan(m.len(), max_pmos)?;
    let zeros = vec![0u8; ZERO_CHUNK];
    let mut at = 0;
    while at < geom.total_size {
        let n = (geom.total_size - at).min(ZERO_CHUNK as u64);
        m.store(at, &zeros[..n as usize])?;
        m.flush_range(at, n)?;
        at += n;
    }
    m.fence();
    for r in geom.uncached_ranges() {
        m.mark_uncached(r)?;
    }
    let header = SystemHeader {
        magic: MAGIC,
        system_name: system_name.to_owned(),
        total_size: geom.total_size,
        metadata_offset: geom.metadata_offset,
        data_offset: geom.data_offset,
        next_free: 0,
        boot_id: 1,
        free_list_head: 0,
        max_pmos,
    };
    let page = header.encode();
    for off in HEADER_UNCACHED.step_by(8) {
        let word = get_u64(&page, off as usize);
        if word != 0 {
            m.uncached_atomic_write(off, word)?;
        }
    }
    m.persist(0, &page[..LINE_SIZE as usize])?;
    Ok(header)
}

/// Reads and validates the header of a formatted device.
pub fn read_header<M: Medium + ?Sized>(m: &M) -> Result<(SystemHeader, Geometry)> {
    if m.len() < PAGE_SIZE {
        return Err(Error::NotFormatted);
    }
    let header = SystemHeader::decode(&m.read_vec(0, 128)?)?;
    if header.total_size != m.len() {
        return Err(Error::Format(format!(
            "header records {} bytes but the device has {}",
            header.total_size,
            m.len()
        )));
    }
    let geom = header.geometry()?;
    Ok((header, geom))
}

/// A non-mutating decode of a device image: header, allocated count and all
/// non-empty metadata slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inspection {
    pub header: SystemHeader,
    pub allocated_count: u64,
    /// `(slot, entry)` for every live or corrupt slot, by slot number.
    pub entries: Vec<(usize, MetadataEntry)>,
}

impl Inspection {
    pub fn read<M: Medium + ?Sized>(m: &M) -> Result<Self> {
        let (header, geom) = read_header(m)?;
        let meta = m.read_vec(geom.metadata_offset, geom.metadata_size as usize)?;
        Self::from_parts(header, &geom, &meta)
    }

    /// Parses a raw device image.
    pub fn parse(image: &[u8]) -> Result<Self> {
        if image.len() < PAGE_SIZE as usize {
            return Err(Error::NotFormatted);
        }
        let header = SystemHeader::decode(&image[..PAGE_SIZE as usize])?;
        if header.total_size != image.len() as u64 {
            return Err(Error::Format(format!(
                "header records {} bytes but the image has {}",
                header.total_size,
                image.len()
            )));
        }
        let geom = header.geometry()?;
        let start = geom.metadata_offset as usize;
        Self::from_parts(
            header,
            &geom,
            &image[start..start + geom.metadata_size as usize],
        )
    }

    fn from_parts(header: SystemHeader, geom: &Geometry, meta: &[u8]) -> Result<Self> {
        let allocated_count = get_u64(meta, 0);
        let entries = (0..geom.max_pmos as usize)
            .filter_map(|slot| {
                let at = (geom.entry_offset(slot) - geom.metadata_offset) as usize;
                let e = MetadataEntry::decode(&meta[at..at + ENTRY_SIZE as usize]);
                matches!(e.state, SlotState::Live(_) | SlotState::Corrupt(_)).then_some((slot, e))
            })
            .collect();
        Ok(Inspection {
            header,
            allocated_count,
            entries,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&MetadataEntry> {
        self.entries.iter().map(|(_, e)| e).find(|e| e.name == name)
    }
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        writeln!(f, "magic {}", String::from_utf8_lossy(&h.magic))?;
        writeln!(f, "system_name {}", h.system_name)?;
        writeln!(f, "total_size {}", h.total_size)?;
        writeln!(f, "metadata_offset {}", h.metadata_offset)?;
        writeln!(f, "data_offset {}", h.data_offset)?;
        writeln!(f, "next_free {}", h.next_free)?;
        writeln!(f, "boot_id {}", h.boot_id)?;
        writeln!(f, "free_list_head {}", h.free_list_head)?;
        writeln!(f, "max_pmos {}", h.max_pmos)?;
        writeln!(f, "allocated_count {}", self.allocated_count)?;
        for (slot, e) in &self.entries {
            let state = match e.state {
                SlotState::Live(s) => s.letter().to_string(),
                other => format!("corrupt({:#x})", other.word()),
            };
            let shadow = e
                .shadow_offset
                .map_or("none".to_string(), |s| s.to_string());
            writeln!(
                f,
                "entry slot={slot} name={} state={state} size={} primary={} shadow={shadow} \
                 readers={} pid={} boot={}",
                e.name, e.size, e.primary_offset, e.reader_count, e.attached_pid, e.attach_boot_id
            )?;
        }
        Ok(())
    }
}
