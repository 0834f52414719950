use std::fs::{File, OpenOptions};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use memmap2::{MmapOptions, MmapRaw};

use super::{check_bounds, LineAddr, Medium, UncachedRanges};
use crate::{Error, Result};

/// Pass-through [`Medium`] over a shared memory mapping.
///
/// Flushes and fences compile to `clflush`/`sfence` on x86-64 and to a
/// full memory fence elsewhere. Uncached atomic writes are emulated with an
/// atomic store followed by a flush and a fence, since user space cannot map
/// pages uncacheable. Crash enumeration is not available on this backend.
pub struct MappedMedium {
    map: MmapRaw,
    len: u64,
    uncached: RwLock<UncachedRanges>,
    _file: Option<File>,
}

impl std::fmt::Debug for MappedMedium {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MappedMedium")
            .field("len", &self.len)
            .finish()
    }
}

impl MappedMedium {
    /// Creates (or truncates) `path` to `size` bytes and maps it.
    pub fn create(path: impl AsRef<Path>, size: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Format("device size must be non-zero".into()));
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(size)?;
        Self::from_file(file, size)
    }

    /// Maps an existing image file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let size = file.metadata()?.len();
        if size == 0 {
            return Err(Error::Format("device image is empty".into()));
        }
        Self::from_file(file, size)
    }

    /// Anonymous zero-filled mapping, for benchmarks and tests.
    pub fn anonymous(size: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Format("device size must be non-zero".into()));
        }
        let map = MmapOptions::new().len(size as usize).map_anon()?;
        Ok(MappedMedium {
            map: MmapRaw::from(map),
            len: size,
            uncached: RwLock::default(),
            _file: None,
        })
    }

    fn from_file(file: File, size: u64) -> Result<Self> {
        let map = MmapRaw::map_raw(&file)?;
        Ok(MappedMedium {
            map,
            len: size,
            uncached: RwLock::default(),
            _file: Some(file),
        })
    }

    fn ptr(&self, offset: u64) -> *mut u8 {
        // SAFETY: callers check bounds before forming the pointer.
        unsafe { self.map.as_mut_ptr().add(offset as usize) }
    }

    fn uncached(&self) -> std::sync::RwLockReadGuard<'_, UncachedRanges> {
        self.uncached.read().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(target_arch = "x86_64")]
fn clflush(p: *const u8) {
    // SAFETY: `p` points into a live mapping; clflush has no other
    // requirement and SSE2 is part of the x86-64 baseline.
    unsafe { std::arch::x86_64::_mm_clflush(p) }
}

#[cfg(not(target_arch = "x86_64"))]
fn clflush(_p: *const u8) {}

#[cfg(target_arch = "x86_64")]
fn sfence() {
    // SAFETY: SSE is part of the x86-64 baseline.
    unsafe { std::arch::x86_64::_mm_sfence() }
}

#[cfg(not(target_arch = "x86_64"))]
fn sfence() {
    std::sync::atomic::fence(Ordering::SeqCst);
}

impl Medium for MappedMedium {
    fn len(&self) -> u64 {
        self.len
    }

    fn store(&self, offset: u64, data: &[u8]) -> Result<()> {
        check_bounds(self.len, offset, data.len() as u64)?;
        self.uncached().check_store(offset, data.len() as u64)?;
        // SAFETY: in bounds; the mapping is never shrunk while we hold it.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), self.ptr(offset), data.len()) };
        Ok(())
    }

    fn flush_line(&self, line: LineAddr) -> Result<()> {
        LineAddr::new(line.offset())?;
        check_bounds(self.len, line.offset(), crate::LINE_SIZE)?;
        clflush(self.ptr(line.offset()));
        Ok(())
    }

    fn fence(&self) {
        sfence();
    }

    fn uncached_atomic_write(&self, offset: u64, word: u64) -> Result<()> {
        check_bounds(self.len, offset, 8)?;
        self.uncached().check_atomic(offset)?;
        let p = self.ptr(offset) as *mut u64;
        // SAFETY: in bounds and 8-byte aligned (the mapping is page aligned
        // and check_atomic enforces offset alignment).
        unsafe { AtomicU64::from_ptr(p) }.store(word, Ordering::SeqCst);
        clflush(p as *const u8);
        sfence();
        Ok(())
    }

    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        check_bounds(self.len, offset, buf.len() as u64)?;
        // SAFETY: in bounds.
        unsafe { std::ptr::copy_nonoverlapping(self.ptr(offset), buf.as_mut_ptr(), buf.len()) };
        Ok(())
    }

    fn mark_uncached(&self, range: Range<u64>) -> Result<()> {
        self.uncached
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(range, self.len)?;
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        if self._file.is_some() {
            self.map.flush()?;
        }
        Ok(())
    }
}

impl Drop for MappedMedium {
    fn drop(&mut self) {
        let _ = self.sync();
    }
}
