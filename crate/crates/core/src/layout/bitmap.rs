//! Shadow extents: a per-page bitmap followed by one shadow page per
//! primary page.
//!
//! Each page has two bits, packed four pages to a byte with page `i` at byte
//! `i / 4`, shift `(i % 4) * 2`.

use super::Geometry;
use crate::PAGE_SIZE;

/// A shadow copy of the page exists.
pub const PRESENT: u8 = 0b01;
/// The shadow page holds psync'd data not yet copied to the primary.
pub const DIRTY: u8 = 0b10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShadowLayout {
    /// Absolute byte offset of the extent.
    pub base: u64,
    pub bitmap_pages: u64,
    /// Number of primary (and shadow) pages.
    pub pages: u64,
}

impl ShadowLayout {
    pub fn new(geom: &Geometry, shadow_page: u64, pages: u64) -> Self {
        ShadowLayout {
            base: geom.data_addr(shadow_page),
            bitmap_pages: Self::bitmap_pages_for(pages),
            pages,
        }
    }

    pub fn bitmap_pages_for(pages: u64) -> u64 {
        pages.div_ceil(4).div_ceil(PAGE_SIZE).max(1)
    }

    /// Pages in the whole extent, bitmap included.
    pub fn extent_pages_for(pages: u64) -> u64 {
        Self::bitmap_pages_for(pages) + pages
    }

    pub fn bitmap_len(&self) -> u64 {
        self.pages.div_ceil(4)
    }

    pub fn bitmap_addr(&self) -> u64 {
        self.base
    }

    /// Absolute offset of the bitmap byte holding `page`'s bits.
    pub fn bitmap_byte_addr(&self, page: u64) -> u64 {
        self.base + page / 4
    }

    pub fn page_addr(&self, page: u64) -> u64 {
        self.base + (self.bitmap_pages + page) * PAGE_SIZE
    }
}

pub fn shift(page: u64) -> u32 {
    ((page % 4) * 2) as u32
}

pub fn page_bits(bitmap: &[u8], page: u64) -> u8 {
    (bitmap[(page / 4) as usize] >> shift(page)) & 0b11
}

pub fn set_bits(bitmap: &mut [u8], page: u64, bits: u8) {
    bitmap[(page / 4) as usize] |= bits << shift(page);
}

pub fn clear_bits(bitmap: &mut [u8], page: u64, bits: u8) {
    bitmap[(page / 4) as usize] &= !(bits << shift(page));
}

pub fn dirty_pages(bitmap: &[u8], pages: u64) -> Vec<u64> {
    (0..pages)
        .filter(|&p| page_bits(bitmap, p) & DIRTY != 0)
        .collect()
}
