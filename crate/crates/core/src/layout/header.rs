use std::ops::Range;

use super::{
    get_text, get_u64, put_u64, ENTRY_SIZE, MAGIC, METADATA_OFFSET, METADATA_PREAMBLE,
    SYSTEM_NAME_LEN,
};
use crate::{Error, Result, LINE_SIZE, PAGE_SIZE};

pub(crate) const H_MAGIC: usize = 0x00;
pub(crate) const H_NAME: usize = 0x08;
pub(crate) const H_TOTAL: usize = 0x48;
pub(crate) const H_META: usize = 0x50;
pub(crate) const H_DATA: usize = 0x58;
pub(crate) const H_NEXT_FREE: u64 = 0x60;
pub(crate) const H_BOOT: u64 = 0x68;
pub(crate) const H_FREE_HEAD: u64 = 0x70;
pub(crate) const H_MAX: usize = 0x78;

/// Header line written only with uncached atomic writes.
pub(crate) const HEADER_UNCACHED: Range<u64> = 0x40..0x80;

/// The header page. Field offsets are fixed; the rest of the page is
/// reserved and zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemHeader {
    pub magic: [u8; 8],
    pub system_name: String,
    pub total_size: u64,
    pub metadata_offset: u64,
    pub data_offset: u64,
    /// Bump pointer in pages, relative to the data region.
    pub next_free: u64,
    pub boot_id: u64,
    /// Absolute byte offset of the first free-list node, 0 when empty.
    pub free_list_head: u64,
    pub max_pmos: u64,
}

impl SystemHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut page = vec![0u8; PAGE_SIZE as usize];
        page[H_MAGIC..H_MAGIC + 8].copy_from_slice(&self.magic);
        let name = self.system_name.as_bytes();
        page[H_NAME..H_NAME + name.len()].copy_from_slice(name);
        put_u64(&mut page, H_TOTAL, self.total_size);
        put_u64(&mut page, H_META, self.metadata_offset);
        put_u64(&mut page, H_DATA, self.data_offset);
        put_u64(&mut page, H_NEXT_FREE as usize, self.next_free);
        put_u64(&mut page, H_BOOT as usize, self.boot_id);
        put_u64(&mut page, H_FREE_HEAD as usize, self.free_list_head);
        put_u64(&mut page, H_MAX, self.max_pmos);
        page
    }

    /// Parses a header page. Fails with `NotFormatted` on a magic mismatch.
    pub fn decode(page: &[u8]) -> Result<Self> {
        if page.len() < 0x80 {
            return Err(Error::Format("header page truncated".into()));
        }
        if page[H_MAGIC..H_MAGIC + 8] != MAGIC {
            return Err(Error::NotFormatted);
        }
        Ok(SystemHeader {
            magic: MAGIC,
            system_name: get_text(&page[H_NAME..H_NAME + SYSTEM_NAME_LEN]),
            total_size: get_u64(page, H_TOTAL),
            metadata_offset: get_u64(page, H_META),
            data_offset: get_u64(page, H_DATA),
            next_free: get_u64(page, H_NEXT_FREE as usize),
            boot_id: get_u64(page, H_BOOT as usize),
            free_list_head: get_u64(page, H_FREE_HEAD as usize),
            max_pmos: get_u64(page, H_MAX),
        })
    }

    /// Region geometry, validated against the format invariants.
    pub fn geometry(&self) -> Result<Geometry> {
        let geom = Geometry::plan(self.total_size, self.max_pmos)?;
        if self.metadata_offset != geom.metadata_offset || self.data_offset != geom.data_offset {
            return Err(Error::Format(format!(
                "region offsets {:#x}/{:#x} do not match geometry {:#x}/{:#x}",
                self.metadata_offset, self.data_offset, geom.metadata_offset, geom.data_offset
            )));
        }
        if self.next_free > geom.data_pages {
            return Err(Error::Format(format!(
                "next_free {} beyond data region of {} pages",
                self.next_free, geom.data_pages
            )));
        }
        Ok(geom)
    }
}

/// Where everything lives on a formatted device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub total_size: u64,
    pub metadata_offset: u64,
    pub metadata_size: u64,
    pub data_offset: u64,
    pub data_pages: u64,
    pub max_pmos: u64,
}

impl Geometry {
    /// Lays out a device of `total_size` bytes holding up to `max_pmos` PMOs.
    pub fn plan(total_size: u64, max_pmos: u64) -> Result<Self> {
        if max_pmos == 0 {
            return Err(Error::Format("max_pmos must be at least 1".into()));
        }
        let metadata_size = max_pmos
            .checked_mul(ENTRY_SIZE)
            .and_then(|n| n.checked_add(METADATA_PREAMBLE))
            .map(|n| n.div_ceil(PAGE_SIZE) * PAGE_SIZE)
            .ok_or_else(|| Error::Format("max_pmos too large".into()))?;
        let data_offset = METADATA_OFFSET + metadata_size;
        let data_pages = total_size.saturating_sub(data_offset) / PAGE_SIZE;
        if data_pages == 0 {
            return Err(Error::Format(format!(
                "device of {total_size} bytes cannot hold a header page, a {metadata_size}-byte \
                 metadata region and one data page"
            )));
        }
        Ok(Geometry {
            total_size,
            metadata_offset: METADATA_OFFSET,
            metadata_size,
            data_offset,
            data_pages,
            max_pmos,
        })
    }

    pub fn count_offset(&self) -> u64 {
        self.metadata_offset
    }

    pub fn entry_offset(&self, slot: usize) -> u64 {
        self.metadata_offset + METADATA_PREAMBLE + slot as u64 * ENTRY_SIZE
    }

    /// Absolute byte offset of data-region page `page`.
    pub fn data_addr(&self, page: u64) -> u64 {
        self.data_offset + page * PAGE_SIZE
    }

    /// Data-region page holding absolute byte offset `addr`.
    pub fn data_page(&self, addr: u64) -> u64 {
        (addr - self.data_offset) / PAGE_SIZE
    }

    pub fn uncached_ranges(&self) -> Vec<Range<u64>> {
        let mut ranges = vec![HEADER_UNCACHED];
        ranges.extend((0..self.max_pmos as usize).map(|slot| {
            let at = self.entry_offset(slot);
            at..at + LINE_SIZE
        }));
        ranges
    }
}

/// The mutable header fields, cached by a mounted system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeaderCache {
    pub next_free: u64,
    pub free_list_head: u64,
    pub boot_id: u64,
}
