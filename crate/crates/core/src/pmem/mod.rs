//! The persistence domain.
//!
//! Everything above this module talks to persistent memory through the
//! [`Medium`] trait, expressed in the vocabulary of the hardware: ordinary
//! (cached) stores, cache-line flushes, store fences and 8-byte atomic writes
//! to uncacheable ranges. Two backends implement it:
//!
//! - [`SimMedium`] wraps a [`PersistenceModel`], which keeps durable media,
//!   volatile dirty cache lines and flushed-but-unfenced lines apart, logs
//!   every event and can enumerate the images a power failure could leave.
//! - [`MappedMedium`] passes everything through to a memory mapping and uses
//!   the real flush and fence instructions where the platform has them.

mod image;
mod mapped;
mod model;
mod sim;

use std::fmt;
use std::ops::Range;

pub use image::DeviceImage;
pub use mapped::MappedMedium;
pub use model::{
    survivor_subsets, CrashImage, CrashState, EventKind, PersistenceModel, ProtocolEvent, Replayer,
    SurvivorSubsets,
};
pub use sim::SimMedium;

use crate::{Error, Result, LINE_SIZE};

/// Byte offset of a cache line inside the device image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineAddr(u64);

impl LineAddr {
    pub fn new(offset: u64) -> Result<Self> {
        if !offset.is_multiple_of(LINE_SIZE) {
            return Err(Error::Range(format!(
                "line address {offset:#x} is not {LINE_SIZE}-byte aligned"
            )));
        }
        Ok(LineAddr(offset))
    }

    /// The line holding byte `offset`.
    pub fn containing(offset: u64) -> Self {
        LineAddr(offset - offset % LINE_SIZE)
    }

    pub fn offset(self) -> u64 {
        self.0
    }

    /// Every line touched by `len` bytes starting at `offset`.
    pub fn span(offset: u64, len: u64) -> impl Iterator<Item = LineAddr> {
        let first = offset / LINE_SIZE;
        let end = if len == 0 {
            first
        } else {
            (offset + len).div_ceil(LINE_SIZE)
        };
        (first..end).map(|l| LineAddr(l * LINE_SIZE))
    }
}

impl fmt::Display for LineAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A byte-addressable persistent medium.
///
/// All methods take `&self`. Callers must not issue overlapping stores from
/// different threads concurrently; the store layer upholds this for metadata
/// and leaves it to the application for PMO contents, as a PMO under
/// concurrent writes during psync is undefined behavior.
pub trait Medium: Send + Sync {
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ordinary cached store. Not durable until flushed and fenced.
    fn store(&self, offset: u64, data: &[u8]) -> Result<()>;

    /// Write a line back towards the persistence domain (CLFLUSHOPT).
    fn flush_line(&self, line: LineAddr) -> Result<()>;

    /// Order all preceding flushes (SFENCE); flushed lines are durable after it.
    fn fence(&self);

    /// Atomic 8-byte write into an uncacheable range; durable on return.
    fn uncached_atomic_write(&self, offset: u64, word: u64) -> Result<()>;

    /// Read what a running CPU would observe.
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()>;

    /// Declare `range` uncacheable. Must be line aligned.
    fn mark_uncached(&self, range: Range<u64>) -> Result<()>;

    /// Push durable contents to whatever backs the medium (file, etc.).
    fn sync(&self) -> Result<()> {
        Ok(())
    }

    fn flush_range(&self, offset: u64, len: u64) -> Result<()> {
        for line in LineAddr::span(offset, len) {
            self.flush_line(line)?;
        }
        Ok(())
    }

    /// Store, flush every touched line and fence.
    fn persist(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.store(offset, data)?;
        self.flush_range(offset, data.len() as u64)?;
        self.fence();
        Ok(())
    }

    fn read_vec(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.read(offset, &mut buf)?;
        Ok(buf)
    }

    fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read(offset, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }
}

pub(crate) fn check_bounds(len: u64, offset: u64, n: u64) -> Result<()> {
    match offset.checked_add(n) {
        Some(end) if end <= len => Ok(()),
        _ => Err(Error::Range(format!(
            "access [{offset:#x}, +{n}) exceeds device size {len:#x}"
        ))),
    }
}

/// Sorted, non-overlapping, line-aligned uncacheable ranges.
#[derive(Clone, Debug, Default)]
pub(crate) struct UncachedRanges(Vec<Range<u64>>);

impl UncachedRanges {
    pub(crate) fn insert(&mut self, range: Range<u64>, device_len: u64) -> Result<bool> {
        if !range.start.is_multiple_of(LINE_SIZE)
            || !range.end.is_multiple_of(LINE_SIZE)
            || range.is_empty()
        {
            return Err(Error::Domain(format!(
                "uncached range {range:?} must be non-empty and line aligned"
            )));
        }
        check_bounds(device_len, range.start, range.end - range.start)?;
        let idx = self.0.partition_point(|r| r.end <= range.start);
        if let Some(r) = self.0.get(idx) {
            if r.start <= range.start && range.end <= r.end {
                return Ok(false);
            }
            if r.start < range.end {
                return Err(Error::Domain(format!(
                    "uncached range {range:?} partially overlaps {r:?}"
                )));
            }
        }
        self.0.insert(idx, range);
        Ok(true)
    }

    pub(crate) fn overlaps(&self, start: u64, end: u64) -> bool {
        let idx = self.0.partition_point(|r| r.end <= start);
        self.0.get(idx).is_some_and(|r| r.start < end)
    }

    pub(crate) fn contains(&self, start: u64, end: u64) -> bool {
        let idx = self.0.partition_point(|r| r.end <= start);
        self.0
            .get(idx)
            .is_some_and(|r| r.start <= start && end <= r.end)
    }

    pub(crate) fn check_store(&self, offset: u64, len: u64) -> Result<()> {
        // Cache lines are the unit of write-back, so a store may not share a
        // line with uncached bytes.
        let start = offset - offset % LINE_SIZE;
        let end = (offset + len).div_ceil(LINE_SIZE) * LINE_SIZE;
        if len > 0 && self.overlaps(start, end) {
            return Err(Error::Domain(format!(
                "cached store [{offset:#x}, +{len}) touches an uncached range"
            )));
        }
        Ok(())
    }

    pub(crate) fn check_atomic(&self, offset: u64) -> Result<()> {
        if !offset.is_multiple_of(8) {
            return Err(Error::Domain(format!(
                "uncached atomic write at {offset:#x} is not 8-byte aligned"
            )));
        }
        if !self.contains(offset, offset + 8) {
            return Err(Error::Domain(format!(
                "uncached atomic write at {offset:#x} outside every uncached range"
            )));
        }
        Ok(())
    }
}
